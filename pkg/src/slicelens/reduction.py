"""Nonlinear dimensionality reduction for embedding tables.

The pipeline reduces context-aware embeddings twice: to 10 dimensions for
density clustering and to 2 dimensions for display. Both runs share one
algorithm:

1. exact k-nearest-neighbor graph under Euclidean distance;
2. per-point bandwidth calibration — for each point, a smoothed kernel
   width sigma_i is bisected so the total membership mass of its k
   neighbors equals log2(k), with rho_i anchoring the nearest neighbor;
3. probabilistic symmetrization of the directed membership graph
   (W + W^T - W o W^T);
4. stochastic gradient layout with negative sampling, attractive and
   repulsive forces following the fitted low-dimensional kernel
   1 / (1 + a * dist^(2b)).

The layout loop is single-threaded and fully seeded, so a (data, seed)
pair always yields the same coordinates.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np
import scipy.sparse
from scipy.optimize import curve_fit

from .errors import ContractError

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3
_BISECTION_ITER = 64


@dataclass(frozen=True)
class ReduceParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    n_epochs: int = 500
    spread: float = 1.0
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    repulsion_strength: float = 1.0


@dataclass(frozen=True)
class ProjectionResult:
    coords: np.ndarray  # (n, out_dims) float32
    meta: dict = field(default_factory=dict)


def exact_knn(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k nearest other points, brute force.

    Rows are sorted by ascending distance with index order breaking ties,
    so results are reproducible bit-for-bit.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ContractError(f"k must be in [1, n-1]; got k={k}, n={n}")
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order.astype(np.int64), dists


def smooth_knn_calibration(knn_dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (sigma, rho) such that sum_j exp(-(d_ij - rho_i)/sigma_i) = log2(k).

    rho_i is the distance to the nearest neighbor (0 when every neighbor is
    a duplicate); distances at or below rho contribute a full unit of mass.
    """
    n = knn_dists.shape[0]
    target = np.log2(k)
    sigmas = np.zeros(n)
    rhos = np.zeros(n)
    mean_all = float(np.mean(knn_dists)) if knn_dists.size else 0.0

    for i in range(n):
        row = knn_dists[i]
        positive = row[row > 0.0]
        rhos[i] = positive[0] if positive.size else 0.0
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(_BISECTION_ITER):
            shifted = row - rhos[i]
            psum = float(np.sum(np.where(shifted > 0, np.exp(-shifted / mid), 1.0)))
            if abs(psum - target) < SMOOTH_K_TOLERANCE:
                break
            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0
        sigmas[i] = mid
        # Guard against collapse on near-duplicate rows.
        floor = MIN_K_DIST_SCALE * (float(np.mean(row)) if rhos[i] > 0 else mean_all)
        if sigmas[i] < floor:
            sigmas[i] = floor
    return sigmas, rhos


def fuzzy_simplicial_set(
    knn_indices: np.ndarray, knn_dists: np.ndarray,
    sigmas: np.ndarray, rhos: np.ndarray, n_points: int,
) -> scipy.sparse.coo_matrix:
    """Symmetrized membership graph: W + W^T - W o W^T."""
    n, k = knn_indices.shape
    rows = np.repeat(np.arange(n), k)
    cols = knn_indices.ravel()
    shifted = knn_dists - rhos[:, None]
    vals = np.where(shifted > 0, np.exp(-shifted / sigmas[:, None]), 1.0).ravel()
    w = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n_points, n_points))
    w.sum_duplicates()
    wt = w.T
    sym = w + wt - w.multiply(wt)
    sym = sym.tocoo()
    sym.eliminate_zeros()
    return sym


def find_ab_params(spread: float, min_dist: float) -> tuple[float, float]:
    """Fit the low-dimensional kernel 1/(1 + a x^(2b)) to the target falloff."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0, spread * 3, 300)
    yv = np.zeros_like(xv)
    yv[xv < min_dist] = 1.0
    yv[xv >= min_dist] = np.exp(-(xv[xv >= min_dist] - min_dist) / spread)
    params, _ = curve_fit(curve, xv, yv)
    return float(params[0]), float(params[1])


@numba.njit(cache=True)
def _tau_rand_int(state):
    state[0] = (((state[0] & 4294967294) << 12) & 0xFFFFFFFF) ^ (
        (((state[0] << 13) & 0xFFFFFFFF) ^ state[0]) >> 19
    )
    state[1] = (((state[1] & 4294967288) << 4) & 0xFFFFFFFF) ^ (
        (((state[1] << 2) & 0xFFFFFFFF) ^ state[1]) >> 25
    )
    state[2] = (((state[2] & 4294967280) << 17) & 0xFFFFFFFF) ^ (
        (((state[2] << 3) & 0xFFFFFFFF) ^ state[2]) >> 11
    )
    return state[0] ^ state[1] ^ state[2]


@numba.njit(cache=True)
def _clip(val):
    if val > 4.0:
        return 4.0
    if val < -4.0:
        return -4.0
    return val


@numba.njit(cache=True)
def _sgd_layout(embedding, head, tail, n_epochs, epochs_per_sample,
                a, b, rng_state, gamma, initial_alpha, negative_sample_rate):
    """Sequential negative-sampling SGD over graph edges (deterministic)."""
    dim = embedding.shape[1]
    n_vertices = embedding.shape[0]
    alpha = initial_alpha

    epochs_per_negative_sample = epochs_per_sample / negative_sample_rate
    epoch_of_next_negative_sample = epochs_per_negative_sample.copy()
    epoch_of_next_sample = epochs_per_sample.copy()

    for n in range(n_epochs):
        for i in range(epochs_per_sample.shape[0]):
            if epoch_of_next_sample[i] > n:
                continue
            j = head[i]
            k = tail[i]
            current = embedding[j]
            other = embedding[k]

            dist_squared = 0.0
            for d in range(dim):
                diff = current[d] - other[d]
                dist_squared += diff * diff

            if dist_squared > 0.0:
                grad_coeff = -2.0 * a * b * dist_squared ** (b - 1.0)
                grad_coeff /= a * dist_squared**b + 1.0
            else:
                grad_coeff = 0.0

            for d in range(dim):
                grad_d = _clip(grad_coeff * (current[d] - other[d]))
                current[d] += grad_d * alpha
                other[d] -= grad_d * alpha

            epoch_of_next_sample[i] += epochs_per_sample[i]

            n_neg_samples = int(
                (n - epoch_of_next_negative_sample[i]) / epochs_per_negative_sample[i]
            )
            for _ in range(n_neg_samples):
                k = _tau_rand_int(rng_state) % n_vertices
                other = embedding[k]

                dist_squared = 0.0
                for d in range(dim):
                    diff = current[d] - other[d]
                    dist_squared += diff * diff

                if dist_squared > 0.0:
                    grad_coeff = 2.0 * gamma * b
                    grad_coeff /= (0.001 + dist_squared) * (a * dist_squared**b + 1.0)
                elif j == k:
                    continue
                else:
                    grad_coeff = 0.0

                for d in range(dim):
                    if grad_coeff > 0.0:
                        grad_d = _clip(grad_coeff * (current[d] - other[d]))
                    else:
                        grad_d = 4.0
                    current[d] += grad_d * alpha

            epoch_of_next_negative_sample[i] += (
                n_neg_samples * epochs_per_negative_sample[i]
            )
        alpha = initial_alpha * (1.0 - float(n + 1) / float(n_epochs))
    return embedding


def _epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    result = -1.0 * np.ones(weights.shape[0])
    n_samples = n_epochs * (weights / weights.max())
    result[n_samples > 0] = float(n_epochs) / n_samples[n_samples > 0]
    return result


def reduce(X: np.ndarray, out_dims: int, params: Optional[ReduceParams] = None,
           seed: int = 0) -> ProjectionResult:
    """Reduce row vectors to `out_dims` coordinates (meta echoes params used)."""
    params = params or ReduceParams()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise ContractError(f"reduction needs at least 4 points, got {n}")
    if out_dims not in (2, 10):
        raise ContractError(f"out_dims must be 2 or 10, got {out_dims}")

    n_neighbors = params.n_neighbors
    if n <= n_neighbors:
        warnings.warn(
            f"n_neighbors={n_neighbors} >= n_points={n}; clamping to {n - 1}",
            stacklevel=2,
        )
        n_neighbors = n - 1

    knn_idx, knn_dists = exact_knn(X, n_neighbors)
    sigmas, rhos = smooth_knn_calibration(knn_dists, n_neighbors)
    graph = fuzzy_simplicial_set(knn_idx, knn_dists, sigmas, rhos, n)

    # Drop edges too weak to ever be sampled.
    graph = graph.tocoo()
    graph.sum_duplicates()
    if graph.data.size == 0:
        raise ContractError("membership graph is empty; input may be degenerate")
    cutoff = graph.data.max() / float(params.n_epochs)
    graph.data[graph.data < cutoff] = 0.0
    graph.eliminate_zeros()

    a, b = find_ab_params(params.spread, params.min_dist)
    rng = np.random.default_rng(seed)
    embedding = rng.uniform(-10.0, 10.0, size=(n, out_dims)).astype(np.float32)
    rng_state = rng.integers(1 << 8, 1 << 30, size=3).astype(np.int64)

    epochs_per_sample = _epochs_per_sample(graph.data, params.n_epochs)
    coords = _sgd_layout(
        embedding,
        graph.row.astype(np.int64),
        graph.col.astype(np.int64),
        params.n_epochs,
        epochs_per_sample,
        a,
        b,
        rng_state,
        float(params.repulsion_strength),
        float(params.learning_rate),
        float(params.negative_sample_rate),
    )
    meta = {
        "out_dims": out_dims,
        "n_neighbors": n_neighbors,
        "min_dist": params.min_dist,
        "n_epochs": params.n_epochs,
        "spread": params.spread,
        "negative_sample_rate": params.negative_sample_rate,
        "seed": seed,
        "a": a,
        "b": b,
    }
    return ProjectionResult(coords=np.asarray(coords, dtype=np.float32), meta=meta)


DISPLAY_MIN_DIST = 0.15  # looser spacing in 2D to reduce visual clutter


def reduce_2d(X: np.ndarray, seed: int = 0,
              params: Optional[ReduceParams] = None) -> ProjectionResult:
    """2D display projection: shares the 10D run's params except min_dist=0.15."""
    params = replace(params or ReduceParams(), min_dist=DISPLAY_MIN_DIST)
    return reduce(X, out_dims=2, params=params, seed=seed)
