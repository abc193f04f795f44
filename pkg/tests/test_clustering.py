"""Density clustering: oracle checks for MST, reachability, silhouette, tuning."""
from __future__ import annotations

import itertools

import numpy as np
import pytest

from slicelens.clustering import (
    core_distances,
    hdbscan,
    mutual_reachability,
    pairwise_distances,
    prim_mst,
    silhouette,
    tune_parameters,
)
from slicelens.errors import ContractError


def mst_weight_oracle(weights: np.ndarray) -> float:
    """O(n^3)-ish Kruskal with explicit edge enumeration."""
    n = weights.shape[0]
    edges = sorted(
        (float(weights[i, j]), i, j) for i in range(n) for j in range(i + 1, n)
    )
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    total, used = 0.0, 0
    for w, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            total += w
            used += 1
            if used == n - 1:
                break
    return total


class TestBuildingBlocks:
    def test_mst_weight_matches_kruskal_oracle(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(50, 3))
        D = pairwise_distances(X)
        mst = prim_mst(D)
        assert mst.shape == (49, 3)
        assert float(mst[:, 2].sum()) == pytest.approx(mst_weight_oracle(D), abs=1e-9)

    def test_mutual_reachability_pointwise(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(20, 2))
        D = pairwise_distances(X)
        core = core_distances(D, 5)
        M = mutual_reachability(D, core)
        for a, b in itertools.combinations(range(20), 2):
            assert M[a, b] == max(core[a], core[b], D[a, b])
            assert M[a, b] == M[b, a]

    def test_core_distance_counts_self(self):
        # colinear points spaced 1 apart: with min_samples=2 the core distance
        # is the distance to the 1st other neighbor
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        D = pairwise_distances(X)
        assert np.allclose(core_distances(D, 2), [1, 1, 1, 1])
        assert np.allclose(core_distances(D, 3), [2, 1, 1, 2])


class TestHdbscan:
    def test_blob_noise_recovery(self, blob_noise_2d):
        from sklearn.metrics import adjusted_rand_score

        X, truth = blob_noise_2d
        result = hdbscan(X, min_cluster_size=10)
        blob_mask = truth >= 0
        assert result.n_clusters == 3
        assert adjusted_rand_score(truth[blob_mask], result.labels[blob_mask]) >= 0.9
        assert int((result.labels[~blob_mask] == -1).sum()) >= 8

    def test_identical_points_single_cluster(self):
        result = hdbscan(np.zeros((20, 3)), min_cluster_size=5)
        assert result.n_clusters == 1
        assert not (result.labels == -1).any()

    def test_fewer_points_than_min_cluster_size(self):
        result = hdbscan(np.random.default_rng(0).normal(size=(4, 2)), min_cluster_size=5)
        assert (result.labels == -1).all()
        assert result.n_clusters == 0

    def test_labels_contiguous_and_min_size(self, blob_noise_2d):
        X, _ = blob_noise_2d
        result = hdbscan(X, min_cluster_size=15)
        labels = sorted(set(result.labels[result.labels >= 0].tolist()))
        assert labels == list(range(len(labels)))
        for lab in labels:
            assert (result.labels == lab).sum() >= 15

    def test_partition_covers_everything(self, blob_noise_2d):
        X, _ = blob_noise_2d
        result = hdbscan(X, min_cluster_size=5)
        assert len(result.labels) == len(X)
        assert set(result.labels.tolist()) <= set(range(-1, result.n_clusters))

    def test_matches_reference_implementation(self, blob_noise_2d):
        from sklearn.cluster import HDBSCAN as SkHDBSCAN
        from sklearn.metrics import adjusted_rand_score

        X, _ = blob_noise_2d
        for mcs in (5, 15):
            mine = hdbscan(X, mcs)
            ref = SkHDBSCAN(min_cluster_size=mcs, min_samples=mcs).fit(X)
            # same partition up to label permutation, including noise handling
            assert adjusted_rand_score(mine.labels, ref.labels_) == pytest.approx(1.0)
            assert ((mine.labels == -1) == (ref.labels_ == -1)).all()


class TestSilhouette:
    def test_two_tight_far_pairs(self):
        pts = np.array([[0, 0], [0, 0.01], [10, 0], [10, 0.01]])
        assert silhouette(pts, np.array([0, 0, 1, 1])) >= 0.99

    def test_single_label_errors(self):
        with pytest.raises(ContractError):
            silhouette(np.zeros((4, 2)), np.array([0, 0, 0, 0]))

    def test_six_point_hand_instance(self):
        pts = np.array([[0.0, 0], [1, 0], [0, 1], [10, 0], [11, 0], [10, 1]])
        labels = np.array([0, 0, 0, 1, 1, 1])
        # independent direct evaluation of mean (b-a)/max(a,b)
        scores = []
        for i in range(6):
            same = [j for j in range(6) if labels[j] == labels[i] and j != i]
            other = [j for j in range(6) if labels[j] != labels[i]]
            a = np.mean([np.linalg.norm(pts[i] - pts[j]) for j in same])
            b = np.mean([np.linalg.norm(pts[i] - pts[j]) for j in other])
            scores.append((b - a) / max(a, b))
        assert silhouette(pts, labels) == pytest.approx(float(np.mean(scores)), abs=1e-12)

    def test_noise_excluded(self):
        pts = np.array([[0, 0], [0, 0.01], [10, 0], [10, 0.01], [500.0, 500.0]])
        labels = np.array([0, 0, 1, 1, -1])
        assert silhouette(pts, labels) >= 0.99


class TestTuneParameters:
    def test_recovers_three_clusters(self, blob_noise_2d):
        X, _ = blob_noise_2d
        best = tune_parameters(X, [5, 10, 15, 20, 25])
        assert best.n_clusters == 3
        assert best.silhouette is not None and best.silhouette > 0.5

    def test_single_config_grid(self, blob_noise_2d):
        X, _ = blob_noise_2d
        best = tune_parameters(X, [15])
        assert best.params == {"min_cluster_size": 15, "min_samples": 15}

    def test_tie_prefers_smaller_size(self):
        # two clean blobs: every config finds the same 2 clusters with the
        # same silhouette, so the smallest grid entry must win
        rng = np.random.default_rng(2)
        X = np.vstack([rng.normal((0, 0), 0.05, (30, 2)), rng.normal((9, 9), 0.05, (30, 2))])
        best = tune_parameters(X, [5, 10, 15])
        assert best.params["min_cluster_size"] == 5

    def test_all_degenerate_reports_no_slices(self):
        X = np.random.default_rng(0).uniform(size=(8, 2))
        best = tune_parameters(X, [50])
        assert best.n_clusters == 0
        assert best.params.get("status") == "no slices found"
        assert (best.labels == -1).all()

    def test_empty_grid_rejected(self):
        with pytest.raises(ContractError):
            tune_parameters(np.zeros((5, 2)), [])

    def test_explicit_pairs_accepted(self, blob_noise_2d):
        X, _ = blob_noise_2d
        best = tune_parameters(X, [(10, 5)])
        assert best.params == {"min_cluster_size": 10, "min_samples": 5}
