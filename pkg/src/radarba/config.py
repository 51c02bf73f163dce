"""Run configuration with documented defaults.

Dataset profiles: voxel size 0.12 m with keyframe threshold 0.5 for
short-range indoor-style sensors, 0.5 m with threshold 0.6 for long-range
automotive-style sensors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import DataError

RPE_DISTANCES = (40.0, 60.0, 80.0, 100.0, 120.0)


@dataclass
class RunConfig:
    # voxel-grid association
    voxel_size: float = 0.5
    tau_overlap: float = 0.1
    tau_time: float = 30.0

    # keyframe selection
    keyframe_overlap_threshold: float = 0.6
    keyframe_window: int = 21
    neighborhood_half_window: int = 10  # 21-frame covariance neighborhood

    # covariance estimation
    sigma_min_sq: float = 1e-4
    min_voxel_points: int = 5
    recompute_covariances: bool = False
    covariance_pose_change_trans: float = 0.1  # m
    covariance_pose_change_rot: float = 0.017453292519943295  # 1 degree

    # optimization schedule
    inner_iterations: int = 6
    outer_iterations: int = 6
    lm_initial_damping: float = 1e-4
    lm_accept_factor: float = 0.5
    lm_reject_factor: float = 10.0
    rel_decrease_tol: float = 1e-6
    step_norm_tol: float = 1e-8
    huber_delta: float = 0.0  # 0 disables the robust kernel

    # IMU weighting
    gyro_noise_density: float = 1e-3
    accel_noise_density: float = 1e-2
    gyro_walk_density: float = 1e-5
    accel_walk_density: float = 1e-4

    # ego-velocity fallback when the stream has no covariance
    ego_sigma_fallback: float = 0.05

    # first-keyframe priors (variances)
    prior_pose_var_rot: float = 1e-4
    prior_pose_var_trans: float = 1e-4
    prior_bias_var: float = 1e-4

    # loop verification
    loop_tau_verify: float = 1.0
    loop_min_inliers: int = 50
    loop_scales: tuple[float, ...] = (8.0, 4.0, 2.0, 1.0)
    loop_outer_per_scale: int = 2

    # pose-graph recovery
    pgo_abs_info: float = 1e6
    pgo_rel_info_rot: float = 1e4
    pgo_rel_info_trans: float = 1e4
    pgo_max_iterations: int = 50
    pgo_rel_decrease_tol: float = 1e-9

    # diagnostics
    bias_gyro_bound: float = 1.0  # rad/s
    bias_accel_bound: float = 5.0  # m/s^2

    # evaluation
    ate_association_tol: float = 0.05
    chamfer_downsample: float = 0.1
    chamfer_truncation: float = 2.0
    rpe_distances: tuple[float, ...] = RPE_DISTANCES

    gravity_magnitude: float = 9.81
    seed: int = 0

    @staticmethod
    def profile(name: str) -> "RunConfig":
        if name in ("coloradar", "short-range"):
            return RunConfig(voxel_size=0.12, keyframe_overlap_threshold=0.5)
        if name in ("snail", "long-range"):
            return RunConfig(voxel_size=0.5, keyframe_overlap_threshold=0.6)
        raise DataError(f"unknown config profile '{name}' (expected 'coloradar' or 'snail')")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise DataError("config JSON must be an object")
        names = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(raw) - names
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        for key in ("loop_scales", "rpe_distances"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return RunConfig(**raw)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as f:
            return RunConfig.from_json(f.read())
