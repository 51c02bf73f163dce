"""Trajectory and map-quality metrics: ATE RMSE after rigid alignment,
rotation RPE RMSE over fixed traveled distances, and Chamfer-L1 between
aggregated point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import RPE_DISTANCES
from .core import PoseTrajectory, log_so3_batch
from .errors import DataError
from .voxelgrid import pack_voxel_keys, voxel_indices


@dataclass
class MetricReport:
    ate_rmse: float = float("nan")
    rpe_rot_rmse_deg: dict = field(default_factory=dict)  # distance (m) -> deg
    rpe_rot_combined_deg: float = float("nan")
    chamfer_l1_cm: float = float("nan")
    alignment_rotation: np.ndarray | None = None
    alignment_translation: np.ndarray | None = None
    matched_pairs: int = 0

    def as_dict(self) -> dict:
        d = {
            "ate_rmse_m": self.ate_rmse,
            "rpe_rot_rmse_deg": {f"{k:g}": v for k, v in self.rpe_rot_rmse_deg.items()},
            "rpe_rot_combined_deg": self.rpe_rot_combined_deg,
            "chamfer_l1_cm": self.chamfer_l1_cm,
            "matched_pairs": self.matched_pairs,
        }
        if self.alignment_rotation is not None:
            d["alignment_rotation"] = self.alignment_rotation.tolist()
            d["alignment_translation"] = self.alignment_translation.tolist()
        return d


def associate_timestamps(t_est: np.ndarray, t_gt: np.ndarray, tol: float = 0.05):
    """Greedy nearest-timestamp matching within tol; returns index pairs."""
    pos = np.searchsorted(t_gt, t_est)
    matches = []
    used = set()
    for i, p in enumerate(pos):
        best, best_d = -1, tol
        for cand in (p - 1, p):
            if 0 <= cand < len(t_gt):
                d = abs(t_est[i] - t_gt[cand])
                if d <= best_d and cand not in used:
                    best, best_d = cand, d
        if best >= 0:
            used.add(best)
            matches.append((i, best))
    return np.asarray(matches, dtype=np.int64).reshape(-1, 2)


def rigid_align(source: np.ndarray, target: np.ndarray):
    """Best-fit SE(3) (R, t) minimizing ||R source + t - target||^2 (no scale),
    via SVD of the cross-covariance."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    W = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_t - R @ mu_s
    return R, t


def ate_rmse(est: PoseTrajectory, gt: PoseTrajectory, association_tol: float = 0.05):
    """RMSE of position errors after a single best-fit rigid alignment of the
    estimate onto ground truth. Returns (rmse, (R, t), n_matched)."""
    matches = associate_timestamps(est.times, gt.times, association_tol)
    if len(matches) < 2:
        raise DataError(
            f"only {len(matches)} timestamp matches within {association_tol} s; need at least 2"
        )
    p_est = est.positions[matches[:, 0]]
    p_gt = gt.positions[matches[:, 1]]
    R, t = rigid_align(p_est, p_gt)
    err = p_est @ R.T + t - p_gt
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    return rmse, (R, t), len(matches)


def rpe_rot_rmse(
    est: PoseTrajectory,
    gt: PoseTrajectory,
    distances: tuple[float, ...] = RPE_DISTANCES,
    association_tol: float = 0.05,
):
    """Rotation RPE RMSE (deg) per traveled distance plus the pooled-pairs
    combined value.

    Every matched pose is a start point; its partner is the first later pose
    whose ground-truth arc length exceeds the target distance. The error is
    the geodesic angle between estimated and ground-truth relative rotations.
    """
    matches = associate_timestamps(est.times, gt.times, association_tol)
    if len(matches) < 2:
        raise DataError("not enough timestamp matches for RPE")
    R_est = est.rotations[matches[:, 0]]
    R_gt = gt.rotations[matches[:, 1]]
    p_gt = gt.positions[matches[:, 1]]
    seg = np.linalg.norm(np.diff(p_gt, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])

    per_distance: dict[float, float] = {}
    pooled: list[np.ndarray] = []
    for d in distances:
        starts, ends = [], []
        j = 0
        for i in range(len(arc)):
            if j <= i:
                j = i + 1
            while j < len(arc) and arc[j] - arc[i] <= d:
                j += 1
            if j >= len(arc):
                break
            starts.append(i)
            ends.append(j)
        if not starts:
            continue
        si = np.asarray(starts)
        ei = np.asarray(ends)
        rel_est = np.einsum("nji,njk->nik", R_est[si], R_est[ei])
        rel_gt = np.einsum("nji,njk->nik", R_gt[si], R_gt[ei])
        err = np.einsum("nji,njk->nik", rel_est, rel_gt)
        ang = np.degrees(np.linalg.norm(log_so3_batch(err), axis=1))
        per_distance[d] = float(np.sqrt(np.mean(ang**2)))
        pooled.append(ang)

    combined = float(np.sqrt(np.mean(np.concatenate(pooled) ** 2))) if pooled else float("nan")
    return per_distance, combined


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid per occupied voxel (deterministic order by voxel key)."""
    if len(points) == 0:
        return points.reshape(0, 3)
    keys = pack_voxel_keys(voxel_indices(points, voxel))
    order = np.argsort(keys, kind="stable")
    keys_sorted = keys[order]
    pts = points[order]
    uniq, starts = np.unique(keys_sorted, return_index=True)
    sums = np.add.reduceat(pts, starts, axis=0)
    counts = np.diff(np.append(starts, len(pts)))
    return sums / counts[:, None]


def chamfer_l1(
    cloud_a: np.ndarray,
    cloud_b: np.ndarray,
    downsample_voxel: float = 0.1,
    truncation: float = 2.0,
) -> float:
    """Symmetric mean nearest-neighbor distance in cm after voxel
    downsampling, with per-point distances clipped at `truncation` meters."""
    a = np.asarray(cloud_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(cloud_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer distance needs two non-empty clouds")
    if downsample_voxel > 0:
        a = voxel_downsample(a, downsample_voxel)
        b = voxel_downsample(b, downsample_voxel)
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    d_ab = np.minimum(d_ab, truncation)
    d_ba = np.minimum(d_ba, truncation)
    return float(100.0 * 0.5 * (d_ab.mean() + d_ba.mean()))


def evaluate_trajectories(
    est: PoseTrajectory,
    gt: PoseTrajectory,
    map_est: np.ndarray | None = None,
    map_gt: np.ndarray | None = None,
    distances: tuple[float, ...] = RPE_DISTANCES,
    association_tol: float = 0.05,
    chamfer_downsample: float = 0.1,
    chamfer_truncation: float = 2.0,
) -> MetricReport:
    report = MetricReport()
    rmse, (R, t), n = ate_rmse(est, gt, association_tol)
    report.ate_rmse = rmse
    report.alignment_rotation = R
    report.alignment_translation = t
    report.matched_pairs = n
    try:
        per_d, combined = rpe_rot_rmse(est, gt, distances, association_tol)
        report.rpe_rot_rmse_deg = per_d
        report.rpe_rot_combined_deg = combined
    except DataError:
        report.rpe_rot_rmse_deg = {}
    if map_est is not None and map_gt is not None:
        report.chamfer_l1_cm = chamfer_l1(map_est, map_gt, chamfer_downsample, chamfer_truncation)
    return report
