"""Density grid over the 2D projection, split into noise and non-noise counts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_RESOLUTION = 64


@dataclass(frozen=True)
class DensityGrid:
    resolution: int
    noise_counts: np.ndarray     # (resolution, resolution) int
    nonnoise_counts: np.ndarray  # (resolution, resolution) int
    bounds: tuple[float, float, float, float]  # (x_min, x_max, y_min, y_max)

    @property
    def total(self) -> int:
        return int(self.noise_counts.sum() + self.nonnoise_counts.sum())


def density_grid(points2d: np.ndarray, noise_flags: np.ndarray,
                 resolution: int = DEFAULT_RESOLUTION) -> DensityGrid:
    """Bin points into a resolution x resolution grid after per-axis min-max
    normalization; points at the max edge fall into the last bin."""
    if resolution < 2:
        raise ContractError(f"grid resolution must be >= 2, got {resolution}")
    points2d = np.asarray(points2d, dtype=np.float64)
    noise_flags = np.asarray(noise_flags, dtype=bool)
    if points2d.ndim != 2 or points2d.shape[1] != 2:
        raise ContractError(f"expected (n, 2) coordinates, got {points2d.shape}")
    if points2d.shape[0] < 1:
        raise ContractError("density grid needs at least one point")
    if noise_flags.shape[0] != points2d.shape[0]:
        raise ContractError("noise_flags length must match point count")

    mins = points2d.min(axis=0)
    maxs = points2d.max(axis=0)
    span = np.where(maxs > mins, maxs - mins, 1.0)
    unit = (points2d - mins) / span
    cells = np.minimum((unit * resolution).astype(int), resolution - 1)

    noise = np.zeros((resolution, resolution), dtype=np.int64)
    nonnoise = np.zeros((resolution, resolution), dtype=np.int64)
    for (cx, cy), is_noise in zip(cells, noise_flags):
        if is_noise:
            noise[cy, cx] += 1
        else:
            nonnoise[cy, cx] += 1
    return DensityGrid(
        resolution=resolution,
        noise_counts=noise,
        nonnoise_counts=nonnoise,
        bounds=(float(mins[0]), float(maxs[0]), float(mins[1]), float(maxs[1])),
    )
