"""Voxel hashing, local temporal-neighborhood grids, and per-point diagonal
covariance estimation.

Covariances are estimated in the radar frame of a center keyframe from the
points of its temporal neighborhood, keeping only per-axis variances. Each
variance is floored at sigma_min_sq; voxels with too few points fall back to
an isotropic variance of voxel_size^2 / 12 (variance of a uniform
distribution over the voxel).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Extrinsics, Pose, RadarFrame, between, require_finite
from .errors import DataError, InvalidArgumentError

DEFAULT_SIGMA_MIN_SQ = 1e-4
DEFAULT_MIN_POINTS = 5
DEFAULT_HALF_WINDOW = 10


def voxel_index(p, voxel_size: float):
    """Per-axis floor(p / voxel_size) as an integer triple.

    Boundary points belong to the cell whose lower face they sit on.
    """
    if voxel_size <= 0.0:
        raise InvalidArgumentError(f"voxel_size must be positive, got {voxel_size}")
    p = np.asarray(p, dtype=np.float64)
    idx = np.floor(p / voxel_size).astype(np.int64)
    return (int(idx[0]), int(idx[1]), int(idx[2]))


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """(N,3) points -> (N,3) int64 voxel indices with floor semantics."""
    if voxel_size <= 0.0:
        raise InvalidArgumentError(f"voxel_size must be positive, got {voxel_size}")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def pack_voxel_keys(idx: np.ndarray) -> np.ndarray:
    """Pack (N,3) voxel indices into sortable scalar keys (21 bits per axis)."""
    shifted = idx.astype(np.int64) + (1 << 20)
    if np.any(shifted < 0) or np.any(shifted >= (1 << 21)):
        raise InvalidArgumentError("voxel index out of packable range (|i| < 2^20)")
    return (shifted[:, 0] << 42) | (shifted[:, 1] << 21) | shifted[:, 2]


def unpack_voxel_key(key: int) -> tuple[int, int, int]:
    mask = (1 << 21) - 1
    return (
        int((key >> 42) & mask) - (1 << 20),
        int((key >> 21) & mask) - (1 << 20),
        int(key & mask) - (1 << 20),
    )


@dataclass
class LocalGrid:
    """Voxelized point set from a temporal neighborhood, expressed in the
    center keyframe's radar frame. Read-only after construction."""

    voxel_size: float
    sigma_min_sq: float
    min_points: int
    _keys: np.ndarray  # sorted unique voxel keys (V,)
    _starts: np.ndarray  # start offset of each voxel's slice in _points (V+1,)
    _points: np.ndarray  # points grouped by voxel (N,3)

    @property
    def fallback_variance(self) -> float:
        return self.voxel_size**2 / 12.0

    @property
    def num_points(self) -> int:
        return self._points.shape[0]

    @property
    def num_voxels(self) -> int:
        return len(self._keys)

    def points_in_voxel(self, index: tuple[int, int, int]) -> np.ndarray:
        key = pack_voxel_keys(np.asarray([index], dtype=np.int64))[0]
        pos = np.searchsorted(self._keys, key)
        if pos >= len(self._keys) or self._keys[pos] != key:
            return np.zeros((0, 3))
        return self._points[self._starts[pos] : self._starts[pos + 1]]

    def covariances(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal covariances for query points (in the grid's frame).

        Returns (variances (N,3), fallback_mask (N,)); the mask flags points
        whose voxel was empty or under-populated and received the isotropic
        fallback.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        keys = pack_voxel_keys(voxel_indices(points, self.voxel_size))
        pos = np.searchsorted(self._keys, keys)
        pos_clipped = np.minimum(pos, len(self._keys) - 1) if len(self._keys) else np.zeros_like(pos)
        hit = len(self._keys) > 0
        found = (keys == self._keys[pos_clipped]) if hit else np.zeros(len(keys), dtype=bool)

        out = np.full((len(points), 3), self.fallback_variance)
        fallback = np.ones(len(points), dtype=bool)
        for which in np.nonzero(found)[0]:
            sl = slice(self._starts[pos_clipped[which]], self._starts[pos_clipped[which] + 1])
            pts = self._points[sl]
            if len(pts) >= self.min_points:
                out[which] = np.maximum(np.var(pts, axis=0, ddof=1), self.sigma_min_sq)
                fallback[which] = False
        return out, fallback


def build_local_grid(
    frames: Sequence[RadarFrame],
    poses: Sequence[Pose],
    center: int,
    half_window: int = DEFAULT_HALF_WINDOW,
    voxel_size: float = 0.5,
    ext: Extrinsics | None = None,
    sigma_min_sq: float = DEFAULT_SIGMA_MIN_SQ,
    min_points: int = DEFAULT_MIN_POINTS,
) -> LocalGrid:
    """Aggregate the temporal neighborhood of `center` (by position in
    `frames`) into a voxel grid in the center frame's radar coordinates.

    `poses` are current body-in-world estimates, one per frame; the window is
    truncated at the sequence ends.
    """
    if ext is None:
        ext = Extrinsics.identity()
    if not (0 <= center < len(frames)):
        raise DataError(f"center frame position {center} outside sequence of {len(frames)}")
    if len(poses) != len(frames):
        raise DataError(f"got {len(poses)} poses for {len(frames)} frames")

    lo = max(0, center - half_window)
    hi = min(len(frames), center + half_window + 1)
    t_cr = poses[center].compose(ext.radar_in_body)  # radar-of-center -> world
    chunks = []
    for i in range(lo, hi):
        pts = frames[i].points
        if pts.shape[0] == 0:
            continue
        rel = between(t_cr, poses[i].compose(ext.radar_in_body))  # radar-of-i -> radar-of-center
        chunks.append(rel.apply(pts))
    all_pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    require_finite(all_pts, "neighborhood points")

    keys = pack_voxel_keys(voxel_indices(all_pts, voxel_size))
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    pts_sorted = all_pts[order]
    uniq, starts = np.unique(keys_sorted, return_index=True)
    starts = np.append(starts, len(keys_sorted))
    return LocalGrid(voxel_size, sigma_min_sq, min_points, uniq, starts, pts_sorted)


def estimate_point_covariance(grid: LocalGrid, p) -> np.ndarray:
    """Diagonal covariance (3,) for a single point in the grid's frame."""
    cov, _ = grid.covariances(np.asarray(p, dtype=np.float64)[None])
    return cov[0]


def world_covariance(R_WB, C_f) -> np.ndarray:
    """Rotate a diagonal covariance into the world frame: R diag(C) R^T."""
    R = R_WB.matrix() if hasattr(R_WB, "matrix") else np.asarray(R_WB, dtype=np.float64)
    c = np.asarray(C_f, dtype=np.float64)
    return (R * c) @ R.T
