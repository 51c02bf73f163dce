"""End-to-end orchestration: keyframe selection by sliding-window overlap,
loop verification via submap alignment, covariance assignment, outer bundle
adjustment, pose-graph recovery of all frames, and map export."""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio, kernels
from .association import (
    CorrespondenceSet,
    VerifiedLoop,
    build_world_grid,
    collect_correspondences,
)
from .config import RunConfig
from .core import (
    Extrinsics,
    KeyframeState,
    Pose,
    PoseTrajectory,
    RadarFrame,
    between,
    pose_local,
    rotation_angle_between,
    transform_radar_point,
)
from .errors import DataError, PipelineError
from .factors import EgoVelocityMeasurement, ImuNoise, ImuSample, preintegrate
from .metrics import voxel_downsample
from .pgo import build_pose_graph, solve_pose_graph
from .solver import KeyframeBundle, LMParams, Problem, SolveReport, solve_inner, solve_outer
from .voxelgrid import build_local_grid, pack_voxel_keys, voxel_indices


@dataclass(frozen=True)
class KeyframeDecision:
    frame_id: int
    overlap: float
    is_keyframe: bool


@dataclass(frozen=True)
class LoopCandidate:
    query_id: int
    match_id: int
    score: float = 0.0

    def __post_init__(self):
        if self.query_id == self.match_id:
            raise DataError("loop candidate pairs a frame with itself")


@dataclass
class LoopVerification:
    candidate: LoopCandidate
    accepted: bool
    loop: VerifiedLoop | None
    reason: str
    mean_whitened: float = float("nan")
    inliers: int = 0
    correspondences: int = 0


def select_keyframes(
    frames: Sequence[RadarFrame],
    poses: Sequence[Pose],
    ext: Extrinsics,
    voxel_size: float,
    threshold: float,
    window: int = 21,
) -> list[KeyframeDecision]:
    """Promote a frame whenever the fraction of its points landing in voxels
    occupied by the most recent `window` keyframes falls below `threshold`.

    Frame 0 always becomes a keyframe (the map starts empty). The map is a
    voxel-occupancy multiset updated on every promotion.
    """
    occupancy: dict[int, int] = {}
    recent: deque[np.ndarray] = deque()
    decisions = []
    for pos, frame in enumerate(frames):
        state = KeyframeState.at_rest(poses[pos], frame.timestamp, frame.frame_id)
        if frame.num_points:
            world = transform_radar_point(state, ext, frame.points)
            keys = np.unique(pack_voxel_keys(voxel_indices(world, voxel_size)))
        else:
            keys = np.zeros(0, dtype=np.int64)
        if len(keys) == 0 or not occupancy:
            overlap = 0.0
        else:
            hits = sum(1 for k in keys.tolist() if k in occupancy)
            overlap = hits / len(keys)
        is_kf = overlap < threshold
        decisions.append(KeyframeDecision(frame.frame_id, overlap, is_kf))
        if is_kf:
            for k in keys.tolist():
                occupancy[k] = occupancy.get(k, 0) + 1
            recent.append(keys)
            if len(recent) > window:
                old = recent.popleft()
                for k in old.tolist():
                    n = occupancy[k] - 1
                    if n:
                        occupancy[k] = n
                    else:
                        del occupancy[k]
    return decisions


def aggregate_submap(
    frames: Sequence[RadarFrame],
    poses: Sequence[Pose],
    ext: Extrinsics,
    center: int,
    half_window: int,
    voxel_size: float,
    sigma_min_sq: float,
    min_points: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gather the temporal neighborhood into the center frame's radar frame
    and assign each aggregated point the covariance of its voxel."""
    grid = build_local_grid(
        frames, poses, center, half_window, voxel_size, ext, sigma_min_sq, min_points
    )
    pts = grid._points
    covs, _ = grid.covariances(pts)
    return pts, covs


@dataclass
class AlignmentResult:
    relative_pose: Pose
    correspondences: int
    mean_whitened: float
    whitened_rmse: float
    inliers: int
    converged: bool
    reason: str = ""


def align_point_sets(
    points_a: np.ndarray,
    cov_a: np.ndarray,
    points_b: np.ndarray,
    cov_b: np.ndarray,
    initial_b_in_a: Pose,
    ext: Extrinsics,
    voxel_size: float,
    scales: tuple[float, ...] = (8.0, 4.0, 2.0, 1.0),
    outer_per_scale: int = 2,
    fine_outer_iterations: int = 10,
    inner_iterations: int = 6,
    lm: LMParams | None = None,
    inlier_threshold: float = 3.0,
) -> AlignmentResult:
    """Pairwise covariance-weighted alignment of two radar-frame point sets.

    Set A is fixed; the pose of set B in A's body frame is refined by
    alternating voxel association and damped Gauss-Newton, sweeping the
    voxel size coarse to fine to widen the convergence basin. The finest
    scale re-associates until the pose stops moving.
    """
    frame_a = RadarFrame(0, 0.0, points_a)
    frame_b = RadarFrame(1, 0.0, points_b)
    state_a = KeyframeState.at_rest(Pose.identity(), 0.0, 0)
    state_b = KeyframeState.at_rest(initial_b_in_a, 0.0, 1)
    states = [state_a, state_b]
    fixed = np.array([True, False])
    lm = lm or LMParams()

    any_corr = False
    for si, scale in enumerate(scales):
        # coarse voxels pair points that may sit anywhere inside the cell;
        # pad the covariances with the matching association variance so the
        # weighting stays consistent with the search radius
        pad = voxel_size**2 * (scale**2 - 1.0) / 12.0
        ca = cov_a + pad
        cb = cov_b + pad
        finest = si == len(scales) - 1
        rounds = max(outer_per_scale, fine_outer_iterations) if finest else outer_per_scale
        for _ in range(rounds):
            grid = build_world_grid(
                [(frame_a, states[0], ca), (frame_b, states[1], cb)],
                ext,
                voxel_size * scale,
            )
            corr = collect_correspondences(grid, tau_overlap=0.0)
            if len(corr) == 0:
                break
            any_corr = True
            problem = Problem(states, ext, corr, fixed=fixed)
            prev = states[1].pose
            states, _ = solve_inner(problem, inner_iterations, lm)
            moved = pose_local(prev, states[1].pose)
            if finest and np.linalg.norm(moved[:3]) < 1e-6 and np.linalg.norm(moved[3:]) < 1e-5:
                break

    if not any_corr:
        return AlignmentResult(states[1].pose, 0, float("nan"), float("nan"), 0, False,
                               "correspondence starvation")

    grid = build_world_grid(
        [(frame_a, states[0], cov_a), (frame_b, states[1], cov_b)], ext, voxel_size
    )
    corr = collect_correspondences(grid, tau_overlap=0.0)
    if len(corr) == 0:
        return AlignmentResult(states[1].pose, 0, float("nan"), float("nan"), 0, False,
                               "no correspondences at finest scale")
    problem = Problem(states, ext, corr, fixed=fixed)
    R, t, R_cov = _pack_pair(states, ext)
    rb = ext.radar_in_body
    _, r_w, _, _ = kernels.geometric_blocks(
        rb.apply(corr.p_fj), rb.apply(corr.p_fk), corr.C_fj, corr.C_fk,
        corr.idx_j, corr.idx_k, R, t, R_cov, with_jacobians=False,
    )
    norms = np.linalg.norm(r_w, axis=1)
    return AlignmentResult(
        relative_pose=states[1].pose,
        correspondences=len(corr),
        mean_whitened=float(norms.mean()),
        whitened_rmse=float(np.sqrt(np.mean(norms**2))),
        inliers=int(np.sum(norms < inlier_threshold)),
        converged=True,
    )


def _pack_pair(states, ext):
    R = np.stack([s.pose.rotation.matrix() for s in states])
    t = np.stack([s.pose.translation for s in states])
    return R, t, R @ ext.radar_in_body.rotation.matrix()


def verify_loop(
    candidate: LoopCandidate,
    frames: Sequence[RadarFrame],
    poses: Sequence[Pose],
    ext: Extrinsics,
    voxel_size: float,
    cfg: RunConfig | None = None,
) -> LoopVerification:
    """Check a place-recognition candidate by aligning two 5-frame submaps
    centered at the query and match frames, starting from the front-end
    relative pose. Accepts when the alignment converges with mean whitened
    residual below the verification threshold and enough inlier pairs."""
    cfg = cfg or RunConfig()
    id_to_pos = {f.frame_id: i for i, f in enumerate(frames)}
    for fid in (candidate.query_id, candidate.match_id):
        if fid not in id_to_pos:
            raise DataError(f"loop candidate references unknown frame {fid}")
    q = id_to_pos[candidate.query_id]
    m = id_to_pos[candidate.match_id]

    pts_q, cov_q = aggregate_submap(
        frames, poses, ext, q, 2, voxel_size, cfg.sigma_min_sq, cfg.min_voxel_points
    )
    pts_m, cov_m = aggregate_submap(
        frames, poses, ext, m, 2, voxel_size, cfg.sigma_min_sq, cfg.min_voxel_points
    )
    if len(pts_q) == 0 or len(pts_m) == 0:
        return LoopVerification(candidate, False, None, "empty submap")

    initial = between(poses[q], poses[m])
    result = align_point_sets(
        pts_q, cov_q, pts_m, cov_m, initial, ext, voxel_size,
        scales=cfg.loop_scales, outer_per_scale=cfg.loop_outer_per_scale,
        inner_iterations=cfg.inner_iterations, lm=LMParams.from_config(cfg),
    )
    if not result.converged:
        return LoopVerification(candidate, False, None, result.reason,
                                result.mean_whitened, result.inliers, result.correspondences)
    if result.mean_whitened >= cfg.loop_tau_verify:
        return LoopVerification(
            candidate, False, None,
            f"mean whitened residual {result.mean_whitened:.3f} >= {cfg.loop_tau_verify}",
            result.mean_whitened, result.inliers, result.correspondences,
        )
    if result.inliers < cfg.loop_min_inliers:
        return LoopVerification(
            candidate, False, None,
            f"only {result.inliers} inlier pairs (< {cfg.loop_min_inliers})",
            result.mean_whitened, result.inliers, result.correspondences,
        )
    loop = VerifiedLoop(
        candidate.query_id,
        candidate.match_id,
        result.relative_pose,
        result.whitened_rmse,
        t_query=frames[q].timestamp,
        t_match=frames[m].timestamp,
    )
    return LoopVerification(candidate, True, loop, "verified",
                            result.mean_whitened, result.inliers, result.correspondences)


@dataclass
class PipelineInput:
    """Normalized pipeline inputs, buildable from a dataset directory or a
    simulated dataset."""

    frames: list[RadarFrame]
    init_poses: list[Pose]
    imu_samples: list[ImuSample]
    ext: Extrinsics
    loop_candidates: list[LoopCandidate] = field(default_factory=list)
    name: str = "dataset"

    @staticmethod
    def from_dataset(ds: dataio.Dataset) -> "PipelineInput":
        samples = [
            ImuSample(float(t), g, a) for t, g, a in zip(ds.imu_times, ds.imu_gyro, ds.imu_accel)
        ]
        return PipelineInput(
            frames=list(ds.frames),
            init_poses=ds.initial.poses(),
            imu_samples=samples,
            ext=ds.ext,
            loop_candidates=[LoopCandidate(q, m, s) for q, m, s in ds.loop_candidates],
            name=ds.name,
        )

    @staticmethod
    def from_sim(sim_ds) -> "PipelineInput":
        return PipelineInput(
            frames=list(sim_ds.frames),
            init_poses=list(sim_ds.init_poses),
            imu_samples=list(sim_ds.imu),
            ext=sim_ds.ext,
            loop_candidates=[LoopCandidate(q, m, s) for q, m, s in sim_ds.loop_candidates],
            name=f"sim-{sim_ds.scenario.kind}",
        )


@dataclass
class PipelineResult:
    trajectory: PoseTrajectory
    keyframe_states: list[KeyframeState]
    keyframe_positions: list[int]
    keyframe_decisions: list[KeyframeDecision]
    map_points: np.ndarray
    verified_loops: list[VerifiedLoop]
    loop_verifications: list[LoopVerification]
    solve_report: SolveReport
    pgo_objectives: list[float]
    warnings: list[str] = field(default_factory=list)
    stage_times: dict = field(default_factory=dict)


def _fd_velocities(times: np.ndarray, positions: np.ndarray) -> np.ndarray:
    v = np.zeros_like(positions)
    if len(times) == 1:
        return v
    v[0] = (positions[1] - positions[0]) / (times[1] - times[0])
    v[-1] = (positions[-1] - positions[-2]) / (times[-1] - times[-2])
    if len(times) > 2:
        dt = (times[2:] - times[:-2])[:, None]
        v[1:-1] = (positions[2:] - positions[:-2]) / dt
    return v


def run_pipeline(data, cfg: RunConfig | None = None, out_dir=None) -> PipelineResult:
    """Execute the full refinement flow on a dataset (dataio.Dataset,
    sim.SimDataset, or PipelineInput) and optionally persist all artifacts.

    Stage errors re-raise as PipelineError with the stage name; whatever
    artifacts exist by then are flushed to out_dir for diagnosis.
    """
    cfg = cfg or RunConfig()
    if isinstance(data, PipelineInput):
        pin = data
    elif isinstance(data, dataio.Dataset):
        pin = PipelineInput.from_dataset(data)
    else:
        pin = PipelineInput.from_sim(data)

    partial: dict = {}
    try:
        return _run_pipeline_stages(pin, cfg, out_dir, partial)
    except Exception as e:
        if out_dir is not None:
            _flush_partial(out_dir, partial, e)
        if isinstance(e, PipelineError):
            raise
        raise PipelineError(partial.get("stage", "setup"), str(e)) from e


def _run_pipeline_stages(pin: PipelineInput, cfg: RunConfig, out_dir, partial: dict) -> PipelineResult:
    warnings: list[str] = []
    stage_times: dict = {}
    frames = pin.frames
    init_poses = pin.init_poses
    ext = pin.ext
    if len(frames) != len(init_poses):
        raise DataError(f"{len(frames)} frames but {len(init_poses)} initial poses")
    times = np.array([f.timestamp for f in frames])

    partial["stage"] = "keyframes"
    t0 = time.perf_counter()
    decisions = select_keyframes(
        frames, init_poses, ext, cfg.voxel_size, cfg.keyframe_overlap_threshold, cfg.keyframe_window
    )
    kf_pos = [i for i, d in enumerate(decisions) if d.is_keyframe]
    partial["keyframe_positions"] = kf_pos
    stage_times["keyframes"] = time.perf_counter() - t0
    if len(kf_pos) < 2:
        raise DataError(f"only {len(kf_pos)} keyframes selected; need at least 2")

    partial["stage"] = "covariances"
    t0 = time.perf_counter()
    kf_covs = []
    for p in kf_pos:
        grid = build_local_grid(
            frames, init_poses, p, cfg.neighborhood_half_window, cfg.voxel_size, ext,
            cfg.sigma_min_sq, cfg.min_voxel_points,
        )
        covs, _ = grid.covariances(frames[p].points)
        kf_covs.append(covs)
    stage_times["covariances"] = time.perf_counter() - t0

    partial["stage"] = "loops"
    t0 = time.perf_counter()
    verifications = []
    verified: list[VerifiedLoop] = []
    for cand in pin.loop_candidates:
        res = verify_loop(cand, frames, init_poses, ext, cfg.voxel_size, cfg)
        verifications.append(res)
        if res.accepted:
            verified.append(res.loop)
        else:
            warnings.append(f"loop ({cand.query_id},{cand.match_id}) rejected: {res.reason}")
    partial["verified_loops"] = verified
    stage_times["loops"] = time.perf_counter() - t0

    partial["stage"] = "bundle-adjustment"
    t0 = time.perf_counter()
    velocities = _fd_velocities(times, np.stack([p.translation for p in init_poses]))
    noise = ImuNoise(
        cfg.gyro_noise_density, cfg.accel_noise_density,
        cfg.gyro_walk_density, cfg.accel_walk_density,
    )
    bundles = []
    states = []
    for n, p in enumerate(kf_pos):
        frame = frames[p]
        states.append(
            KeyframeState(init_poses[p], velocities[p], np.zeros(3), np.zeros(3),
                          frame.timestamp, frame.frame_id)
        )
        ego = None
        if frame.ego_velocity is not None:
            cov = frame.ego_covariance
            if cov is None:
                cov = cfg.ego_sigma_fallback**2 * np.eye(3)
            omega = frame.omega_body_raw if frame.omega_body_raw is not None else np.zeros(3)
            ego = EgoVelocityMeasurement(frame.ego_velocity, cov, omega)
        imu_to_next = None
        if n + 1 < len(kf_pos):
            t_a, t_b = frames[p].timestamp, frames[kf_pos[n + 1]].timestamp
            imu_to_next = preintegrate(pin.imu_samples, t_a, t_b, (np.zeros(3), np.zeros(3)), noise)
        bundles.append(KeyframeBundle(frame, kf_covs[n], imu_to_next, ego))

    updater = None
    if cfg.recompute_covariances:
        updater = _make_covariance_updater(frames, init_poses, kf_pos, ext, cfg)
    kf_states, solve_report = solve_outer(bundles, states, verified, ext, cfg, updater)
    partial["keyframe_states"] = kf_states
    partial["solve_report"] = solve_report
    warnings.extend(solve_report.diagnostics)
    stage_times["bundle-adjustment"] = time.perf_counter() - t0

    partial["stage"] = "pose-graph"
    t0 = time.perf_counter()
    relposes = [between(init_poses[i], init_poses[i + 1]) for i in range(len(frames) - 1)]
    constraints = {p: s.pose for p, s in zip(kf_pos, kf_states)}
    graph = build_pose_graph(
        init_poses, constraints, relposes,
        cfg.pgo_abs_info, cfg.pgo_rel_info_rot, cfg.pgo_rel_info_trans,
    )
    all_poses, pgo_objectives = solve_pose_graph(graph, cfg.pgo_max_iterations, cfg.pgo_rel_decrease_tol)
    trajectory = PoseTrajectory.from_poses(times, all_poses)
    partial["trajectory"] = trajectory
    stage_times["pose-graph"] = time.perf_counter() - t0

    partial["stage"] = "map-export"
    t0 = time.perf_counter()
    map_points = aggregate_map(frames, all_poses, ext, cfg.voxel_size)
    partial["map_points"] = map_points
    stage_times["map-export"] = time.perf_counter() - t0

    result = PipelineResult(
        trajectory=trajectory,
        keyframe_states=kf_states,
        keyframe_positions=kf_pos,
        keyframe_decisions=decisions,
        map_points=map_points,
        verified_loops=verified,
        loop_verifications=verifications,
        solve_report=solve_report,
        pgo_objectives=pgo_objectives,
        warnings=warnings,
        stage_times=stage_times,
    )

    if out_dir is not None:
        partial["stage"] = "write-outputs"
        reports = {
            "name": pin.name,
            "keyframes": len(kf_pos),
            "frames": len(frames),
            "correspondence_counts": solve_report.correspondence_counts,
            "objective_trace": solve_report.objective_trace,
            "pgo_objectives": pgo_objectives,
            "verified_loops": [
                {"query": lp.query_id, "match": lp.match_id, "rmse": lp.residual_rmse}
                for lp in verified
            ],
            "warnings": warnings,
            "stage_times": stage_times,
            "wall_time": solve_report.wall_time,
        }
        dataio.write_outputs(out_dir, trajectory, kf_states, map_points, reports, cfg)
    return result


def aggregate_map(
    frames: Sequence[RadarFrame],
    poses: Sequence[Pose],
    ext: Extrinsics,
    downsample_voxel: float,
) -> np.ndarray:
    """All frames' points in the world under the given poses, voxel-downsampled."""
    chunks = []
    for frame, pose in zip(frames, poses):
        if frame.num_points:
            st = KeyframeState.at_rest(pose, frame.timestamp, frame.frame_id)
            chunks.append(transform_radar_point(st, ext, frame.points))
    if not chunks:
        return np.zeros((0, 3))
    cloud = np.concatenate(chunks, axis=0)
    return voxel_downsample(cloud, downsample_voxel)


def _make_covariance_updater(frames, init_poses, kf_pos, ext, cfg):
    """Refresh keyframe point covariances when a keyframe moved enough since
    its covariances were last computed. Neighborhood poses mix current
    keyframe estimates with front-end poses for non-keyframes."""
    last_poses = {p: init_poses[p] for p in kf_pos}

    def updater(states, covariances):
        poses = list(init_poses)
        for p, s in zip(kf_pos, states):
            poses[p] = s.pose
        out = list(covariances)
        for n, p in enumerate(kf_pos):
            prev = last_poses[p]
            cur = poses[p]
            moved_t = float(np.linalg.norm(cur.translation - prev.translation))
            moved_r = rotation_angle_between(prev.rotation, cur.rotation)
            if moved_t > cfg.covariance_pose_change_trans or moved_r > cfg.covariance_pose_change_rot:
                grid = build_local_grid(
                    frames, poses, p, cfg.neighborhood_half_window, cfg.voxel_size, ext,
                    cfg.sigma_min_sq, cfg.min_voxel_points,
                )
                out[n], _ = grid.covariances(frames[p].points)
                last_poses[p] = cur
        return out

    return updater


def _flush_partial(out_dir, partial: dict, error: Exception) -> None:
    try:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        info = {"stage": partial.get("stage", "setup"), "error": str(error)}
        with open(root / "error.json", "w") as f:
            json.dump(info, f, indent=2)
            f.write("\n")
        if "trajectory" in partial:
            dataio.write_trajectory(root / "trajectory_partial.txt", partial["trajectory"])
        if "keyframe_states" in partial:
            dataio.write_keyframe_states(root / "keyframes_partial.txt", partial["keyframe_states"])
        if "map_points" in partial:
            dataio.write_ply(root / "map_partial.ply", partial["map_points"])
    except OSError:
        pass
