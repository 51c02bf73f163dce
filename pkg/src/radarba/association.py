"""World-frame voxel grid, pairwise overlap gating, and correspondence
extraction for the multi-frame geometric cost.

Every keyframe point is inserted into a world voxel grid built from the
current states; each voxel keeps at most one point per frame (the one
nearest the voxel center). Valid frame pairs sharing a voxel contribute one
point-pair constraint each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .core import Extrinsics, KeyframeState, Pose, RadarFrame, transform_radar_point
from .errors import DataError
from .voxelgrid import pack_voxel_keys, voxel_indices

DEFAULT_TAU_OVERLAP = 0.1
DEFAULT_TAU_TIME = 30.0


@dataclass(frozen=True)
class VerifiedLoop:
    """A loop candidate that survived submap alignment. residual_rmse is the
    RMS whitened point-pair residual at the accepted relative pose."""

    query_id: int
    match_id: int
    relative_pose: Pose
    residual_rmse: float
    t_query: float = 0.0
    t_match: float = 0.0


class Correspondence(NamedTuple):
    voxel: tuple[int, int, int]
    frame_j: int
    frame_k: int
    p_fj: np.ndarray
    p_fk: np.ndarray
    C_fj: np.ndarray
    C_fk: np.ndarray


@dataclass
class CorrespondenceSet:
    """Struct-of-arrays collection of point-pair constraints; idx_* are state
    positions in the keyframe sequence, frame_id_* the original frame ids."""

    voxel: np.ndarray  # (N,3) int64
    idx_j: np.ndarray
    idx_k: np.ndarray
    frame_id_j: np.ndarray
    frame_id_k: np.ndarray
    p_fj: np.ndarray
    p_fk: np.ndarray
    C_fj: np.ndarray
    C_fk: np.ndarray

    def __len__(self) -> int:
        return len(self.idx_j)

    def __iter__(self) -> Iterator[Correspondence]:
        for i in range(len(self)):
            yield Correspondence(
                tuple(self.voxel[i]),
                int(self.frame_id_j[i]),
                int(self.frame_id_k[i]),
                self.p_fj[i],
                self.p_fk[i],
                self.C_fj[i],
                self.C_fk[i],
            )

    @staticmethod
    def empty() -> "CorrespondenceSet":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return CorrespondenceSet(np.zeros((0, 3), dtype=np.int64), zi, zi, zi, zi, z3, z3, z3, z3)


@dataclass
class WorldVoxelGrid:
    """Deduplicated world-frame voxel grid; entries are sorted by (voxel key,
    frame position) and read-only after construction."""

    voxel_size: float
    frame_ids: list[int]
    timestamps: np.ndarray
    keys: np.ndarray  # (N,) packed voxel key per entry
    frame_pos: np.ndarray  # (N,) keyframe position per entry
    point_index: np.ndarray  # (N,) original point index within the frame
    sensor_points: np.ndarray  # (N,3)
    covariances: np.ndarray  # (N,3)
    world_points: np.ndarray  # (N,3) at insertion states
    voxel_starts: np.ndarray = field(init=False)  # (V+1,) group offsets
    unique_keys: np.ndarray = field(init=False)

    def __post_init__(self):
        self.unique_keys, starts = np.unique(self.keys, return_index=True)
        self.voxel_starts = np.append(starts, len(self.keys))
        self._frame_counts = np.bincount(self.frame_pos, minlength=len(self.frame_ids))
        self._id_to_pos = {fid: i for i, fid in enumerate(self.frame_ids)}

    @property
    def num_entries(self) -> int:
        return len(self.keys)

    @property
    def num_voxels(self) -> int:
        return len(self.unique_keys)

    def occupied_voxel_count(self, frame_id: int) -> int:
        return int(self._frame_counts[self._id_to_pos[frame_id]])

    def entries_in_voxel(self, index) -> list[int]:
        key = pack_voxel_keys(np.asarray([index], dtype=np.int64))[0]
        pos = np.searchsorted(self.unique_keys, key)
        if pos >= len(self.unique_keys) or self.unique_keys[pos] != key:
            return []
        return list(range(self.voxel_starts[pos], self.voxel_starts[pos + 1]))


def build_world_grid(
    keyframes: Sequence[tuple[RadarFrame, KeyframeState, np.ndarray]],
    ext: Extrinsics,
    voxel_size: float,
) -> WorldVoxelGrid:
    """Insert all keyframe points (with per-point diagonal covariances) into
    a world voxel grid under the current states.

    When several points of one frame fall into one voxel, the point nearest
    the voxel center is kept; ties resolve to the lowest point index.
    """
    key_chunks, pos_chunks, pidx_chunks = [], [], []
    pts_chunks, cov_chunks, world_chunks = [], [], []
    frame_ids, timestamps = [], []

    for pos, (frame, state, covs) in enumerate(keyframes):
        frame_ids.append(frame.frame_id)
        timestamps.append(state.timestamp)
        n = frame.num_points
        if n == 0:
            continue
        covs = np.asarray(covs, dtype=np.float64)
        if covs.shape != (n, 3):
            raise DataError(
                f"frame {frame.frame_id}: covariance shape {covs.shape} does not match {n} points"
            )
        world = transform_radar_point(state, ext, frame.points)
        vox = voxel_indices(world, voxel_size)
        keys = pack_voxel_keys(vox)
        centers = (vox.astype(np.float64) + 0.5) * voxel_size
        dist = np.linalg.norm(world - centers, axis=1)
        pidx = np.arange(n)
        order = np.lexsort((pidx, dist, keys))
        keys_sorted = keys[order]
        keep = order[np.unique(keys_sorted, return_index=True)[1]]

        key_chunks.append(keys[keep])
        pos_chunks.append(np.full(len(keep), pos, dtype=np.int64))
        pidx_chunks.append(pidx[keep])
        pts_chunks.append(frame.points[keep])
        cov_chunks.append(covs[keep])
        world_chunks.append(world[keep])

    if key_chunks:
        keys = np.concatenate(key_chunks)
        fpos = np.concatenate(pos_chunks)
        pidx = np.concatenate(pidx_chunks)
        pts = np.concatenate(pts_chunks)
        covs = np.concatenate(cov_chunks)
        world = np.concatenate(world_chunks)
    else:
        keys = np.zeros(0, dtype=np.int64)
        fpos = np.zeros(0, dtype=np.int64)
        pidx = np.zeros(0, dtype=np.int64)
        pts = covs = world = np.zeros((0, 3))

    order = np.lexsort((fpos, keys))
    return WorldVoxelGrid(
        voxel_size,
        frame_ids,
        np.asarray(timestamps, dtype=np.float64),
        keys[order],
        fpos[order],
        pidx[order],
        pts[order],
        covs[order],
        world[order],
    )


def voxel_overlap_ratio(a: int, b: int, grid: WorldVoxelGrid) -> float:
    """Shared-voxel count over the smaller frame's occupied-voxel count.

    `a`, `b` are frame ids; frames with zero occupied voxels give 0.
    """
    pa = grid._id_to_pos[a]
    pb = grid._id_to_pos[b]
    ka = grid.keys[grid.frame_pos == pa]
    kb = grid.keys[grid.frame_pos == pb]
    if len(ka) == 0 or len(kb) == 0:
        return 0.0
    shared = len(np.intersect1d(ka, kb, assume_unique=True))
    return shared / min(len(ka), len(kb))


def frame_pair_valid(
    a: tuple[int, float],
    b: tuple[int, float],
    overlap: float,
    loop_times: Sequence[tuple[float, float]],
    tau_overlap: float = DEFAULT_TAU_OVERLAP,
    tau_time: float = DEFAULT_TAU_TIME,
) -> bool:
    """Admission rule for a frame pair: sufficient voxel overlap AND (close
    in time OR both frames within tau_time of the two ends of some verified
    loop, in either role order). `a`, `b` are (frame_id, timestamp)."""
    if not overlap > tau_overlap:
        return False
    t_a, t_b = a[1], b[1]
    if abs(t_a - t_b) < tau_time:
        return True
    for t_q, t_m in loop_times:
        if abs(t_a - t_q) < tau_time and abs(t_b - t_m) < tau_time:
            return True
        if abs(t_a - t_m) < tau_time and abs(t_b - t_q) < tau_time:
            return True
    return False


def loop_time_pairs(loops: Sequence[VerifiedLoop]) -> list[tuple[float, float]]:
    return [(lp.t_query, lp.t_match) for lp in loops]


_PAIR_TEMPLATES: dict[int, np.ndarray] = {}


def _pair_template(n: int) -> np.ndarray:
    tpl = _PAIR_TEMPLATES.get(n)
    if tpl is None:
        tpl = np.array(list(combinations(range(n), 2)), dtype=np.int64)
        _PAIR_TEMPLATES[n] = tpl
    return tpl


def collect_correspondences(
    grid: WorldVoxelGrid,
    loops: Sequence[VerifiedLoop] = (),
    tau_overlap: float = DEFAULT_TAU_OVERLAP,
    tau_time: float = DEFAULT_TAU_TIME,
) -> CorrespondenceSet:
    """Emit one constraint per (voxel, valid unordered frame pair).

    Overlap ratios are computed once per frame pair from the same grid and
    cached; output is sorted by (voxel, frame_j, frame_k).
    """
    if grid.num_entries == 0:
        return CorrespondenceSet.empty()

    counts = np.diff(grid.voxel_starts)
    ent_a_chunks, ent_b_chunks = [], []
    for v in np.nonzero(counts >= 2)[0]:
        start = grid.voxel_starts[v]
        tpl = _pair_template(int(counts[v]))
        ent_a_chunks.append(tpl[:, 0] + start)
        ent_b_chunks.append(tpl[:, 1] + start)
    if not ent_a_chunks:
        return CorrespondenceSet.empty()
    ent_a = np.concatenate(ent_a_chunks)
    ent_b = np.concatenate(ent_b_chunks)

    # entries are sorted by frame position inside each voxel, so j < k holds
    pos_a = grid.frame_pos[ent_a]
    pos_b = grid.frame_pos[ent_b]
    nf = len(grid.frame_ids)
    pair_code = pos_a * nf + pos_b
    uniq_codes, inverse, co_counts = np.unique(pair_code, return_inverse=True, return_counts=True)

    frame_counts = grid._frame_counts
    ua = (uniq_codes // nf).astype(np.int64)
    ub = (uniq_codes % nf).astype(np.int64)
    denom = np.minimum(frame_counts[ua], frame_counts[ub])
    with np.errstate(divide="ignore", invalid="ignore"):
        overlap = np.where(denom > 0, co_counts / np.maximum(denom, 1), 0.0)

    lt = loop_time_pairs(loops)
    ids = np.asarray(grid.frame_ids, dtype=np.int64)
    ts = grid.timestamps
    pair_ok = np.array(
        [
            frame_pair_valid(
                (int(ids[ua[i]]), float(ts[ua[i]])),
                (int(ids[ub[i]]), float(ts[ub[i]])),
                float(overlap[i]),
                lt,
                tau_overlap,
                tau_time,
            )
            for i in range(len(uniq_codes))
        ],
        dtype=bool,
    )

    keep = pair_ok[inverse]
    ent_a = ent_a[keep]
    ent_b = ent_b[keep]
    if len(ent_a) == 0:
        return CorrespondenceSet.empty()

    vox_keys = grid.keys[ent_a]
    order = np.lexsort((grid.frame_pos[ent_b], grid.frame_pos[ent_a], vox_keys))
    ent_a = ent_a[order]
    ent_b = ent_b[order]

    mask = (1 << 21) - 1
    k = grid.keys[ent_a]
    voxel = np.stack(
        [((k >> 42) & mask) - (1 << 20), ((k >> 21) & mask) - (1 << 20), (k & mask) - (1 << 20)],
        axis=1,
    )
    return CorrespondenceSet(
        voxel=voxel,
        idx_j=grid.frame_pos[ent_a],
        idx_k=grid.frame_pos[ent_b],
        frame_id_j=ids[grid.frame_pos[ent_a]],
        frame_id_k=ids[grid.frame_pos[ent_b]],
        p_fj=grid.sensor_points[ent_a].copy(),
        p_fk=grid.sensor_points[ent_b].copy(),
        C_fj=grid.covariances[ent_a].copy(),
        C_fk=grid.covariances[ent_b].copy(),
    )
