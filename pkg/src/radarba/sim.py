"""Deterministic synthetic radar--inertial world generator.

Provides ground truth for every property and acceptance test: structured
point environments, smooth analytic trajectories, radar frames with
range-independent Gaussian noise, IMU samples, ego-velocity measurements,
and controlled pose perturbations. Every operation is a pure function of
(inputs, seed).

The world point cloud is thinned so that no two points share a voxel of the
configured size; with zero sensor noise this makes every multi-frame voxel
correspondence exact at ground truth, which the fixed-point tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Extrinsics, Pose, PoseTrajectory, RadarFrame, Rotation, pose_retract
from .errors import InvalidArgumentError
from .factors import ImuNoise, ImuSample
from .voxelgrid import pack_voxel_keys, voxel_indices

TRAJECTORY_KINDS = ("line", "loop", "figure8")


@dataclass(frozen=True)
class TrajectoryModel:
    """Closed-form C2 trajectory; poses are yaw-only with the body x-axis
    following the horizontal velocity direction."""

    kind: str
    duration: float
    speed: float
    z_amplitude: float = 0.0

    def _theta_rate(self) -> float:
        return 2.0 * math.pi / self.duration

    def _fig8_scale(self) -> float:
        return self.speed / (self._theta_rate() * math.sqrt(1.25))

    def position(self, t: float) -> np.ndarray:
        if self.kind == "line":
            return np.array([self.speed * t, 0.0, 0.0])
        if self.kind == "loop":
            w = self._theta_rate()
            r = self.speed / w
            return np.array([r * math.sin(w * t), r * (1.0 - math.cos(w * t)), 0.0])
        w = self._theta_rate()
        a = self._fig8_scale()
        th = w * t
        return np.array(
            [a * math.sin(th), 0.25 * a * math.sin(2.0 * th), self.z_amplitude * (1.0 - math.cos(th))]
        )

    def velocity_w(self, t: float) -> np.ndarray:
        if self.kind == "line":
            return np.array([self.speed, 0.0, 0.0])
        if self.kind == "loop":
            w = self._theta_rate()
            return self.speed * np.array([math.cos(w * t), math.sin(w * t), 0.0])
        w = self._theta_rate()
        a = self._fig8_scale()
        th = w * t
        return np.array(
            [a * w * math.cos(th), 0.5 * a * w * math.cos(2.0 * th), self.z_amplitude * w * math.sin(th)]
        )

    def acceleration_w(self, t: float) -> np.ndarray:
        if self.kind == "line":
            return np.zeros(3)
        if self.kind == "loop":
            w = self._theta_rate()
            return self.speed * w * np.array([-math.sin(w * t), math.cos(w * t), 0.0])
        w = self._theta_rate()
        a = self._fig8_scale()
        th = w * t
        return np.array(
            [
                -a * w * w * math.sin(th),
                -a * w * w * math.sin(2.0 * th),
                self.z_amplitude * w * w * math.cos(th),
            ]
        )

    def yaw(self, t: float) -> float:
        v = self.velocity_w(t)
        return math.atan2(v[1], v[0])

    def yaw_rate(self, t: float) -> float:
        if self.kind == "line":
            return 0.0
        if self.kind == "loop":
            return self._theta_rate()
        v = self.velocity_w(t)
        a = self.acceleration_w(t)
        return float((v[0] * a[1] - v[1] * a[0]) / (v[0] ** 2 + v[1] ** 2))

    def angular_velocity_body(self, t: float) -> np.ndarray:
        return np.array([0.0, 0.0, self.yaw_rate(t)])

    def pose(self, t: float) -> Pose:
        return Pose(Rotation.from_axis_angle(np.array([0.0, 0.0, self.yaw(t)])), self.position(t))

    def sample(self, times: np.ndarray) -> PoseTrajectory:
        poses = [self.pose(float(t)) for t in times]
        return PoseTrajectory.from_poses(times, poses)


def generate_trajectory(kind: str, duration: float, speed: float, seed: int = 0,
                        z_amplitude: float | None = None) -> TrajectoryModel:
    """Build a closed-form trajectory of the given kind ("line", "loop",
    "figure8"). `seed` is accepted for interface uniformity; the shapes are
    deterministic. figure8 gets a gentle vertical bob unless overridden."""
    if kind not in TRAJECTORY_KINDS:
        raise InvalidArgumentError(f"unknown trajectory kind '{kind}' (expected {TRAJECTORY_KINDS})")
    if duration <= 0:
        raise InvalidArgumentError("duration must be positive")
    if z_amplitude is None:
        z_amplitude = 0.3 if kind == "figure8" else 0.0
    return TrajectoryModel(kind, float(duration), float(speed), float(z_amplitude))


@dataclass(frozen=True)
class SyntheticWorld:
    """Static point environment sampled from box surfaces and pillars, thinned
    to at most one point per `thin_voxel` cell.

    Each point carries a reflectivity strength; frames keep the strongest
    visible points, so the same scatterers persist across frames the way
    strong radar reflectors do."""

    points: np.ndarray
    strength: np.ndarray
    extent: tuple[float, float, float]
    center: tuple[float, float, float]
    thin_voxel: float
    seed: int

    @property
    def num_points(self) -> int:
        return len(self.points)


def _sample_plane(rng, origin, u_vec, v_vec, u_len, v_len, spacing):
    nu = max(int(round(u_len / spacing)), 1)
    nv = max(int(round(v_len / spacing)), 1)
    uu, vv = np.meshgrid(
        (np.arange(nu) + 0.5) * (u_len / nu), (np.arange(nv) + 0.5) * (v_len / nv), indexing="ij"
    )
    jitter_u = rng.uniform(-0.2, 0.2, uu.shape) * (u_len / nu)
    jitter_v = rng.uniform(-0.2, 0.2, vv.shape) * (v_len / nv)
    uu = (uu + jitter_u).ravel()
    vv = (vv + jitter_v).ravel()
    return origin[None, :] + uu[:, None] * u_vec[None, :] + vv[:, None] * v_vec[None, :]


def make_box_world(
    extent: tuple[float, float, float] = (40.0, 40.0, 5.0),
    center: tuple[float, float, float] = (0.0, 0.0, 0.0),
    spacing: float = 0.7,
    thin_voxel: float = 0.5,
    n_pillars: int = 6,
    seed: int = 0,
) -> SyntheticWorld:
    """Box room (floor, ceiling, four walls) with interior pillars.

    `center` is the floor center; `spacing` the nominal surface sample pitch.
    """
    rng = np.random.default_rng(seed)
    ex, ey, ez = extent
    cx, cy, cz = center
    x0, y0, z0 = cx - ex / 2, cy - ey / 2, cz
    ux = np.array([1.0, 0.0, 0.0])
    uy = np.array([0.0, 1.0, 0.0])
    uz = np.array([0.0, 0.0, 1.0])

    chunks = [
        _sample_plane(rng, np.array([x0, y0, z0]), ux, uy, ex, ey, spacing),  # floor
        _sample_plane(rng, np.array([x0, y0, z0 + ez]), ux, uy, ex, ey, spacing),  # ceiling
        _sample_plane(rng, np.array([x0, y0, z0]), ux, uz, ex, ez, spacing),
        _sample_plane(rng, np.array([x0, y0 + ey, z0]), ux, uz, ex, ez, spacing),
        _sample_plane(rng, np.array([x0, y0, z0]), uy, uz, ey, ez, spacing),
        _sample_plane(rng, np.array([x0 + ex, y0, z0]), uy, uz, ey, ez, spacing),
    ]
    for _ in range(n_pillars):
        px = rng.uniform(x0 + 0.15 * ex, x0 + 0.85 * ex)
        py = rng.uniform(y0 + 0.15 * ey, y0 + 0.85 * ey)
        side = rng.uniform(0.8, 2.0)
        for du, dv, orig in (
            (ux, uz, np.array([px - side / 2, py - side / 2, z0])),
            (ux, uz, np.array([px - side / 2, py + side / 2, z0])),
            (uy, uz, np.array([px - side / 2, py - side / 2, z0])),
            (uy, uz, np.array([px + side / 2, py - side / 2, z0])),
        ):
            chunks.append(_sample_plane(rng, orig, du, dv, side, ez, spacing))

    pts = np.concatenate(chunks, axis=0)
    # thin: at most one point per voxel so cross-frame voxel mates coincide
    keys = pack_voxel_keys(voxel_indices(pts, thin_voxel))
    order = np.lexsort((np.arange(len(pts)), keys))
    keep = order[np.unique(keys[order], return_index=True)[1]]
    keep.sort()
    strength = rng.uniform(0.0, 1.0, len(pts))
    return SyntheticWorld(pts[keep], strength[keep], extent, center, thin_voxel, seed)


@dataclass(frozen=True)
class RadarSensor:
    max_range: float = 14.0
    fov_azimuth_deg: float = 140.0
    fov_elevation_deg: float = 70.0
    points_per_frame: int = 150
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.max_range <= 0 or self.points_per_frame <= 0:
            raise InvalidArgumentError("sensor parameters must be positive")


def render_radar_frame(
    world: SyntheticWorld,
    pose_at_t: Pose,
    ext: Extrinsics,
    sensor: RadarSensor,
    seed: int = 0,
    frame_id: int = 0,
    timestamp: float = 0.0,
    velocity_w: np.ndarray | None = None,
    omega_body: np.ndarray | None = None,
    ego_sigma: float = 0.02,
    gyro_bias: np.ndarray | None = None,
) -> RadarFrame:
    """Render the visible world points in the sensor frame plus the exact
    ego-velocity measurement model (inverted at zero noise).

    Visibility is range plus an azimuth/elevation cone around the sensor
    x-axis; occlusion is not modeled. When more points are visible than
    points_per_frame, the strongest reflectors are kept (persistent across
    frames, like real radar scatterers).
    """
    rng = np.random.default_rng(seed)
    t_wr = pose_at_t.compose(ext.radar_in_body)
    local = t_wr.inverse().apply(world.points)
    rng_dist = np.linalg.norm(local, axis=1)
    az = np.degrees(np.arctan2(local[:, 1], local[:, 0]))
    el = np.degrees(np.arctan2(local[:, 2], np.hypot(local[:, 0], local[:, 1])))
    mask = (
        (rng_dist <= sensor.max_range)
        & (rng_dist > 1e-9)
        & (np.abs(az) <= sensor.fov_azimuth_deg / 2)
        & (np.abs(el) <= sensor.fov_elevation_deg / 2)
    )
    idx = np.nonzero(mask)[0]
    if len(idx) > sensor.points_per_frame:
        order = np.argsort(-world.strength[idx], kind="stable")
        idx = np.sort(idx[order[: sensor.points_per_frame]])
    pts = local[idx]
    if sensor.noise_sigma > 0 and len(pts):
        pts = pts + rng.normal(0.0, sensor.noise_sigma, pts.shape)

    ego_v = ego_cov = omega_raw = None
    if velocity_w is not None and omega_body is not None:
        R_br = ext.radar_in_body.rotation.matrix()
        p_br = ext.radar_in_body.translation
        R_wb = pose_at_t.rotation.matrix()
        v_exact = R_br.T @ (R_wb.T @ np.asarray(velocity_w) + np.cross(omega_body, p_br))
        noise = rng.normal(0.0, ego_sigma, 3) if ego_sigma > 0 else np.zeros(3)
        ego_v = v_exact + noise
        ego_cov = max(ego_sigma, 1e-3) ** 2 * np.eye(3)
        bg = np.zeros(3) if gyro_bias is None else np.asarray(gyro_bias, dtype=np.float64)
        omega_raw = np.asarray(omega_body, dtype=np.float64) + bg

    return RadarFrame(frame_id, timestamp, pts, ego_v, ego_cov, omega_raw)


def render_imu(
    trajectory: TrajectoryModel,
    rate_hz: float,
    noise: ImuNoise = ImuNoise(),
    seed: int = 0,
    gravity_w: np.ndarray | None = None,
) -> list[ImuSample]:
    """Sample ideal IMU measurements along the trajectory at rate_hz:
    accel = R^T (a_w - g) + b_a + white noise, gyro = w_b + b_g + white."""
    if rate_hz < 50.0:
        raise InvalidArgumentError(f"IMU rate must be >= 50 Hz, got {rate_hz}")
    g = np.array([0.0, 0.0, -9.81]) if gravity_w is None else np.asarray(gravity_w)
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    n = int(round(trajectory.duration * rate_hz)) + 1
    times = np.arange(n) * dt
    sigma_g = noise.gyro_noise_density * math.sqrt(rate_hz)
    sigma_a = noise.accel_noise_density * math.sqrt(rate_hz)
    gyro_noise = rng.normal(0.0, sigma_g, (n, 3)) if sigma_g > 0 else np.zeros((n, 3))
    accel_noise = rng.normal(0.0, sigma_a, (n, 3)) if sigma_a > 0 else np.zeros((n, 3))

    samples = []
    for i, t in enumerate(times):
        R = trajectory.pose(float(t)).rotation.matrix()
        accel = R.T @ (trajectory.acceleration_w(float(t)) - g) + noise.bias_accel + accel_noise[i]
        gyro = trajectory.angular_velocity_body(float(t)) + noise.bias_gyro + gyro_noise[i]
        samples.append(ImuSample(float(t), gyro, accel))
    return samples


def perturb_trajectory(
    poses: Sequence[Pose],
    sigma_rot: float,
    sigma_trans: float,
    mode: str = "white",
    seed: int = 0,
) -> list[Pose]:
    """Compose seeded world-frame perturbations onto each pose.

    "white": independent per-pose errors. "random-walk": errors accumulate
    over the sequence (sigma is the per-step increment scale), mimicking
    odometry drift while keeping consecutive relative poses nearly exact.
    """
    if sigma_rot < 0 or sigma_trans < 0:
        raise InvalidArgumentError("perturbation sigmas must be non-negative")
    if mode not in ("white", "random-walk"):
        raise InvalidArgumentError(f"unknown perturbation mode '{mode}'")
    rng = np.random.default_rng(seed)
    out = []
    acc = np.zeros(6)
    for p in poses:
        step = np.concatenate([rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3)])
        if mode == "random-walk":
            acc = acc + step
            delta = acc
        else:
            delta = step
        out.append(pose_retract(p, delta))
    return out


@dataclass
class SimScenario:
    """Everything needed to synthesize one dataset deterministically."""

    kind: str = "loop"
    duration: float = 60.0
    speed: float = 0.75
    radar_rate: float = 10.0
    imu_rate: float = 200.0
    sensor: RadarSensor = field(default_factory=RadarSensor)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    ego_sigma: float = 0.02
    voxel_size: float = 0.5  # intended mapping voxel
    # world thinning resolution; None means voxel_size, which makes every
    # cross-frame voxel mate the same world point (exact zero-noise regime)
    world_thin_voxel: float | None = None
    world_extent: tuple[float, float, float] = (40.0, 40.0, 5.0)
    world_spacing: float = 1.1
    n_pillars: int = 6
    perturb_mode: str | None = None
    perturb_sigma_rot: float = 0.0
    perturb_sigma_trans: float = 0.0
    inject_loop_candidate: bool = False
    extrinsics_lever_arm: tuple[float, float, float] = (0.2, 0.0, 0.1)
    extrinsics_yaw_deg: float = 3.0
    seed: int = 0


SCENARIOS = {
    "line": SimScenario(kind="line", duration=30.0, speed=1.0),
    "loop": SimScenario(kind="loop", duration=60.0, speed=0.75, inject_loop_candidate=True),
    "figure8": SimScenario(kind="figure8", duration=60.0, speed=0.9),
    "loop-noisy": SimScenario(
        kind="loop",
        duration=60.0,
        speed=0.75,
        inject_loop_candidate=True,
        sensor=RadarSensor(points_per_frame=400, noise_sigma=0.05),
        world_thin_voxel=0.18,
        world_spacing=0.5,
    ),
    "loop-drift": SimScenario(
        kind="loop",
        duration=120.0,
        speed=0.75,
        inject_loop_candidate=True,
        sensor=RadarSensor(points_per_frame=400, noise_sigma=0.05),
        world_thin_voxel=0.18,
        world_spacing=0.5,
        imu_noise=ImuNoise(gyro_noise_density=2e-4, accel_noise_density=2e-3),
        perturb_mode="random-walk",
        perturb_sigma_rot=2e-4,
        perturb_sigma_trans=4e-3,
    ),
}


@dataclass
class SimDataset:
    """In-memory synthetic dataset plus ground truth."""

    scenario: SimScenario
    world: SyntheticWorld
    ext: Extrinsics
    frames: list[RadarFrame]
    imu: list[ImuSample]
    gt_poses: list[Pose]
    init_poses: list[Pose]
    gt_velocities: np.ndarray  # (N,3)
    gt_omegas: np.ndarray  # (N,3)
    loop_candidates: list[tuple[int, int, float]]
    trajectory: TrajectoryModel

    @property
    def times(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def gt_trajectory(self) -> PoseTrajectory:
        return PoseTrajectory.from_poses(self.times, self.gt_poses)

    def init_trajectory(self) -> PoseTrajectory:
        return PoseTrajectory.from_poses(self.times, self.init_poses)


def _scenario_extrinsics(sc: SimScenario) -> Extrinsics:
    yaw = math.radians(sc.extrinsics_yaw_deg)
    return Extrinsics(
        Pose(Rotation.from_axis_angle(np.array([0.0, 0.0, yaw])), np.array(sc.extrinsics_lever_arm))
    )


def simulate_dataset(scenario: SimScenario) -> SimDataset:
    """Render a full dataset (frames, IMU, ego velocities, initial trajectory,
    loop candidates) for the scenario; bit-identical for identical inputs."""
    sc = scenario
    traj = generate_trajectory(sc.kind, sc.duration, sc.speed)
    n_frames = int(round(sc.duration * sc.radar_rate))
    times = np.arange(n_frames) / sc.radar_rate

    # center the world on the trajectory footprint
    probe = np.stack([traj.position(float(t)) for t in np.linspace(0, sc.duration, 64)])
    center = (
        float(0.5 * (probe[:, 0].min() + probe[:, 0].max())),
        float(0.5 * (probe[:, 1].min() + probe[:, 1].max())),
        -sc.world_extent[2] / 2.0,
    )
    thin = sc.world_thin_voxel if sc.world_thin_voxel is not None else sc.voxel_size
    world = make_box_world(
        sc.world_extent, center, sc.world_spacing, thin, sc.n_pillars, sc.seed
    )
    ext = _scenario_extrinsics(sc)

    seeds = np.random.SeedSequence(sc.seed).generate_state(n_frames + 2)
    frames, gt_poses, vels, omegas = [], [], [], []
    for i, t in enumerate(times):
        pose = traj.pose(float(t))
        v = traj.velocity_w(float(t))
        w = traj.angular_velocity_body(float(t))
        frames.append(
            render_radar_frame(
                world, pose, ext, sc.sensor,
                seed=int(seeds[i]), frame_id=i, timestamp=float(t),
                velocity_w=v, omega_body=w, ego_sigma=sc.ego_sigma,
                gyro_bias=sc.imu_noise.bias_gyro,
            )
        )
        gt_poses.append(pose)
        vels.append(v)
        omegas.append(w)

    imu = render_imu(traj, sc.imu_rate, sc.imu_noise, seed=int(seeds[n_frames]))

    if sc.perturb_mode:
        init_poses = perturb_trajectory(
            gt_poses, sc.perturb_sigma_rot, sc.perturb_sigma_trans,
            sc.perturb_mode, seed=int(seeds[n_frames + 1]),
        )
    else:
        init_poses = list(gt_poses)

    loop_candidates: list[tuple[int, int, float]] = []
    if sc.inject_loop_candidate and sc.kind == "loop" and n_frames > 20:
        q = 5
        positions = np.stack([p.translation for p in gt_poses])
        d = np.linalg.norm(positions[n_frames // 2 :] - positions[q], axis=1)
        m = int(n_frames // 2 + np.argmin(d))
        loop_candidates.append((q, m, 1.0))

    return SimDataset(
        sc, world, ext, frames, imu, gt_poses, init_poses,
        np.stack(vels), np.stack(omegas), loop_candidates, traj,
    )
