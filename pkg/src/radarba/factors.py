"""Residuals, information weighting, and analytic Jacobians for the bundle
adjustment objective: voxel geometric terms, IMU preintegration, radar
ego-velocity, and first-keyframe priors.

All Jacobians are taken with respect to the 15-dim state tangent
[rot, trans, vel, bg, ba], with rotations perturbed on the left
(R <- Exp(d) R). The total objective is the sum of squared whitened
residuals over all emitted blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .core import (
    BA,
    BG,
    ROT,
    TANGENT_DIM,
    TRANS,
    VEL,
    Extrinsics,
    KeyframeState,
    Pose,
    between,
    exp_so3,
    log_so3,
    pose_log,
    right_jacobian,
    right_jacobian_inv,
    skew,
)
from .errors import DataGapError, InvalidArgumentError
from .voxelgrid import world_covariance


def sqrt_information(cov: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular S with S^T S = cov^-1 (S = L^-1 for cov = L L^T)."""
    c = np.asarray(cov, dtype=np.float64)
    if jitter > 0.0:
        c = c + jitter * np.eye(c.shape[0])
    try:
        L = np.linalg.cholesky(c)
    except np.linalg.LinAlgError as e:
        raise InvalidArgumentError(f"covariance is not positive definite: {e}") from e
    return scipy.linalg.solve_triangular(L, np.eye(c.shape[0]), lower=True)


@dataclass
class FactorBlock:
    """One residual block: raw residual, per-state Jacobians in tangent
    coordinates, and the square-root information used for whitening."""

    residual: np.ndarray
    jacobians: dict[int, np.ndarray]  # state index -> (d, 15)
    sqrt_info: np.ndarray

    def whitened_residual(self) -> np.ndarray:
        return self.sqrt_info @ self.residual

    def whitened_jacobian(self, state_index: int) -> np.ndarray:
        return self.sqrt_info @ self.jacobians[state_index]

    def cost(self) -> float:
        r = self.whitened_residual()
        return float(r @ r)


class ImuSample(NamedTuple):
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time IMU noise densities plus the constant true biases used
    by the simulator (the densities also weight the preintegration factor)."""

    gyro_noise_density: float = 1e-3  # rad/s/sqrt(Hz)
    accel_noise_density: float = 1e-2  # m/s^2/sqrt(Hz)
    gyro_walk_density: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_walk_density: float = 1e-4  # m/s^3/sqrt(Hz)
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_walk_density", "accel_walk_density"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")


@dataclass
class PreintegratedImu:
    """Relative motion between two keyframe times integrated from IMU samples
    at a fixed linearization bias, with first-order bias Jacobians and a 9x9
    covariance in [rot, vel, pos] order."""

    t0: float
    t1: float
    dt: float
    delta_R: np.ndarray  # (3,3)
    delta_v: np.ndarray
    delta_p: np.ndarray
    covariance: np.ndarray  # (9,9)
    J_R_bg: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    lin_bias_gyro: np.ndarray
    lin_bias_accel: np.ndarray

    @property
    def bias_jacobians(self) -> np.ndarray:
        """9x6 stacked [d(rot,vel,pos) / d(bg, ba)]."""
        J = np.zeros((9, 6))
        J[0:3, 0:3] = self.J_R_bg
        J[3:6, 0:3] = self.J_v_bg
        J[3:6, 3:6] = self.J_v_ba
        J[6:9, 0:3] = self.J_p_bg
        J[6:9, 3:6] = self.J_p_ba
        return J

    def corrected_deltas(self, bias_gyro: np.ndarray, bias_accel: np.ndarray):
        """First-order bias-corrected (delta_R, delta_v, delta_p)."""
        dbg = bias_gyro - self.lin_bias_gyro
        dba = bias_accel - self.lin_bias_accel
        dR = self.delta_R @ exp_so3(self.J_R_bg @ dbg)
        dv = self.delta_v + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dp = self.delta_p + self.J_p_bg @ dbg + self.J_p_ba @ dba
        return dR, dv, dp


def preintegrate(
    samples: Sequence[ImuSample],
    t0: float,
    t1: float,
    bias: tuple[np.ndarray, np.ndarray] = (np.zeros(3), np.zeros(3)),
    noise: ImuNoise = ImuNoise(),
    max_gap_factor: float = 2.0,
) -> PreintegratedImu:
    """Midpoint-rule preintegration of gyro/accel samples over [t0, t1].

    Samples must bracket the interval with strictly increasing timestamps;
    measurements at the interval bounds are linearly interpolated. A gap of
    more than max_gap_factor times the nominal sample period raises
    DataGapError.
    """
    bg = np.asarray(bias[0], dtype=np.float64)
    ba = np.asarray(bias[1], dtype=np.float64)
    if t1 < t0:
        raise InvalidArgumentError(f"t1 ({t1}) must be >= t0 ({t0})")
    if t1 == t0:
        return PreintegratedImu(
            t0, t1, 0.0, np.eye(3), np.zeros(3), np.zeros(3), np.zeros((9, 9)),
            np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)),
            bg.copy(), ba.copy(),
        )

    ts = np.array([s.t for s in samples], dtype=np.float64)
    if len(ts) < 2 or np.any(np.diff(ts) <= 0):
        raise DataGapError("need at least two strictly increasing IMU samples")
    if ts[0] > t0 or ts[-1] < t1:
        raise DataGapError(f"IMU samples [{ts[0]:.6f}, {ts[-1]:.6f}] do not cover [{t0:.6f}, {t1:.6f}]")
    gyr = np.stack([np.asarray(s.gyro, dtype=np.float64) for s in samples])
    acc = np.stack([np.asarray(s.accel, dtype=np.float64) for s in samples])

    nominal = float(np.median(np.diff(ts)))
    in_window = (ts >= t0 - nominal) & (ts <= t1 + nominal)
    gaps = np.diff(ts[in_window])
    if len(gaps) and np.max(gaps) > max_gap_factor * nominal:
        raise DataGapError(
            f"IMU gap of {np.max(gaps):.4f} s exceeds {max_gap_factor} x nominal period {nominal:.4f} s"
        )

    def value_at(t: float) -> tuple[np.ndarray, np.ndarray]:
        i = np.searchsorted(ts, t, side="right") - 1
        i = min(max(i, 0), len(ts) - 2)
        a = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1 - a) * gyr[i] + a * gyr[i + 1], (1 - a) * acc[i] + a * acc[i + 1]

    # integration knots: t0, interior sample times, t1
    interior = ts[(ts > t0) & (ts < t1)]
    knots = np.concatenate([[t0], interior, [t1]])

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((9, 9))
    J_R_bg = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))

    sg2 = noise.gyro_noise_density**2
    sa2 = noise.accel_noise_density**2
    eye3 = np.eye(3)

    for a_t, b_t in zip(knots[:-1], knots[1:]):
        dt = b_t - a_t
        if dt <= 0.0:
            continue
        g0, a0 = value_at(a_t)
        g1, a1 = value_at(b_t)
        w_mid = 0.5 * (g0 + g1) - bg
        theta = w_mid * dt
        E = exp_so3(theta)
        dR_next = dR @ E
        a_mid0 = a0 - ba
        a_mid1 = a1 - ba
        acc_w = 0.5 * (dR @ a_mid0 + dR_next @ a_mid1)  # in the start frame of the interval chain
        a_body = 0.5 * (a_mid0 + a_mid1)
        R_half = dR @ exp_so3(0.5 * theta)

        # first-order covariance propagation in [rot, vel, pos]
        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = -R_half @ skew(a_body) * dt
        A[6:9, 0:3] = -0.5 * R_half @ skew(a_body) * dt * dt
        A[6:9, 3:6] = eye3 * dt
        Jr = right_jacobian(theta)
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = R_half * dt
        B[6:9, 3:6] = 0.5 * R_half * dt * dt
        Q = np.zeros((6, 6))
        Q[0:3, 0:3] = (sg2 / dt) * eye3
        Q[3:6, 3:6] = (sa2 / dt) * eye3
        cov = A @ cov @ A.T + B @ Q @ B.T

        # bias jacobians (first order)
        J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * R_half @ skew(a_body) @ J_R_bg * dt * dt
        J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * R_half * dt * dt
        J_v_bg = J_v_bg - R_half @ skew(a_body) @ J_R_bg * dt
        J_v_ba = J_v_ba - R_half * dt
        J_R_bg = E.T @ J_R_bg - Jr * dt

        dp = dp + dv * dt + 0.5 * acc_w * dt * dt
        dv = dv + acc_w * dt
        dR = dR_next

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(
        t0, t1, float(t1 - t0), dR, dv, dp, cov,
        J_R_bg, J_v_bg, J_v_ba, J_p_bg, J_p_ba, bg.copy(), ba.copy(),
    )


def imu_residual(
    pre: PreintegratedImu,
    s_a: KeyframeState,
    s_b: KeyframeState,
    gravity_w: np.ndarray,
    walk_gyro_density: float = 1e-5,
    walk_accel_density: float = 1e-4,
) -> tuple[FactorBlock, FactorBlock]:
    """9-dim preintegration residual between consecutive keyframes plus the
    6-dim bias random-walk residual.

    Residual order is [rotation, velocity, position]; the preintegrated
    deltas are bias-corrected to first order around the current biases of the
    earlier keyframe.
    """
    ia, ib = 0, 1  # jacobian keys: 0 -> s_a, 1 -> s_b
    g = np.asarray(gravity_w, dtype=np.float64)
    dt = pre.dt
    Ra = s_a.pose.rotation.matrix()
    Rb = s_b.pose.rotation.matrix()
    ta, tb = s_a.pose.translation, s_b.pose.translation
    va, vb = s_a.velocity_w, s_b.velocity_w

    dbg = s_a.bias_gyro - pre.lin_bias_gyro
    corr = pre.J_R_bg @ dbg
    dR_hat, dv_hat, dp_hat = pre.corrected_deltas(s_a.bias_gyro, s_a.bias_accel)

    M = dR_hat.T @ Ra.T @ Rb
    r_rot = log_so3(M)
    u_v = vb - va - g * dt
    u_p = tb - ta - va * dt - 0.5 * g * dt * dt
    r_vel = Ra.T @ u_v - dv_hat
    r_pos = Ra.T @ u_p - dp_hat
    residual = np.concatenate([r_rot, r_vel, r_pos])

    Jri = right_jacobian_inv(r_rot)
    Ja = np.zeros((9, TANGENT_DIM))
    Jb = np.zeros((9, TANGENT_DIM))

    Ja[0:3, ROT] = -Jri @ Rb.T
    Jb[0:3, ROT] = Jri @ Rb.T
    # rotation residual w.r.t. gyro bias through the first-order correction
    Ja[0:3, BG] = -Jri @ M.T @ right_jacobian(corr) @ pre.J_R_bg

    Ja[3:6, ROT] = Ra.T @ skew(u_v)
    Ja[3:6, VEL] = -Ra.T
    Jb[3:6, VEL] = Ra.T
    Ja[3:6, BG] = -pre.J_v_bg
    Ja[3:6, BA] = -pre.J_v_ba

    Ja[6:9, ROT] = Ra.T @ skew(u_p)
    Ja[6:9, TRANS] = -Ra.T
    Jb[6:9, TRANS] = Ra.T
    Ja[6:9, VEL] = -Ra.T * dt
    Ja[6:9, BG] = -pre.J_p_bg
    Ja[6:9, BA] = -pre.J_p_ba

    S = sqrt_information(pre.covariance, jitter=1e-12)
    block = FactorBlock(residual, {ia: Ja, ib: Jb}, S)

    # bias random walk between the two keyframes
    r_bias = np.concatenate([s_b.bias_gyro - s_a.bias_gyro, s_b.bias_accel - s_a.bias_accel])
    Jba = np.zeros((6, TANGENT_DIM))
    Jbb = np.zeros((6, TANGENT_DIM))
    Jba[0:3, BG] = -np.eye(3)
    Jba[3:6, BA] = -np.eye(3)
    Jbb[0:3, BG] = np.eye(3)
    Jbb[3:6, BA] = np.eye(3)
    dt_eff = max(dt, 1e-6)
    walk_cov = np.diag(
        [walk_gyro_density**2 * dt_eff] * 3 + [walk_accel_density**2 * dt_eff] * 3
    )
    bias_block = FactorBlock(r_bias, {ia: Jba, ib: Jbb}, sqrt_information(walk_cov))
    return block, bias_block


@dataclass(frozen=True)
class EgoVelocityMeasurement:
    """Radar ego-velocity measurement: velocity in the radar frame with its
    covariance, plus the raw (bias-uncorrected) gyro rate at the frame time.
    The factor subtracts the current gyro-bias estimate from omega_body_raw."""

    v_r: np.ndarray
    covariance: np.ndarray
    omega_body_raw: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.covariance, dtype=np.float64)
        if c.shape != (3, 3):
            raise InvalidArgumentError(f"ego covariance must be 3x3, got {c.shape}")
        if not np.allclose(c, c.T, atol=1e-12):
            raise InvalidArgumentError("ego covariance must be symmetric")
        object.__setattr__(self, "covariance", c)
        object.__setattr__(self, "v_r", np.asarray(self.v_r, dtype=np.float64))
        object.__setattr__(self, "omega_body_raw", np.asarray(self.omega_body_raw, dtype=np.float64))


def ego_velocity_residual(s: KeyframeState, m: EgoVelocityMeasurement, ext: Extrinsics) -> FactorBlock:
    """Residual R_BR^T (R_WB^T v_W + omega_B x p_BR) - v_tilde, whitened by
    the measurement covariance; omega_B is the bias-corrected gyro rate."""
    R_br = ext.radar_in_body.rotation.matrix()
    p_br = ext.radar_in_body.translation
    R_wb = s.pose.rotation.matrix()
    omega = m.omega_body_raw - s.bias_gyro
    v_body = R_wb.T @ s.velocity_w
    residual = R_br.T @ (v_body + np.cross(omega, p_br)) - m.v_r

    J = np.zeros((3, TANGENT_DIM))
    J[:, ROT] = R_br.T @ R_wb.T @ skew(s.velocity_w)
    J[:, VEL] = R_br.T @ R_wb.T
    J[:, BG] = R_br.T @ skew(p_br)

    return FactorBlock(residual, {0: J}, sqrt_information(m.covariance))


def prior_factors(
    s1: KeyframeState,
    pose_prior: Pose,
    cov_pose: np.ndarray,
    bias_prior: np.ndarray,
    cov_bias: np.ndarray,
) -> tuple[FactorBlock, FactorBlock]:
    """Gauge-fixing prior on the first keyframe pose and a prior on its
    biases. The pose residual is the log of prior^-1 o pose."""
    err = between(pose_prior, s1.pose)
    r_pose = pose_log(err)
    Rp = pose_prior.rotation.matrix()
    R1 = s1.pose.rotation.matrix()
    J_pose = np.zeros((6, TANGENT_DIM))
    J_pose[0:3, ROT] = right_jacobian_inv(r_pose[:3]) @ R1.T
    J_pose[3:6, TRANS] = Rp.T
    pose_block = FactorBlock(r_pose, {0: J_pose}, sqrt_information(cov_pose))

    bias_prior = np.asarray(bias_prior, dtype=np.float64)
    r_bias = np.concatenate([s1.bias_gyro, s1.bias_accel]) - bias_prior
    J_bias = np.zeros((6, TANGENT_DIM))
    J_bias[0:3, BG] = np.eye(3)
    J_bias[3:6, BA] = np.eye(3)
    bias_block = FactorBlock(r_bias, {0: J_bias}, sqrt_information(cov_bias))
    return pose_block, bias_block


def geometric_factor(c, s_j: KeyframeState, s_k: KeyframeState, ext: Extrinsics) -> FactorBlock:
    """Single point-pair constraint between two keyframes sharing a voxel.

    `c` needs attributes p_fj, p_fk (sensor-frame points) and C_fj, C_fk
    (diagonal variances in the covariance reference frame). The residual is
    the world-frame point difference, whitened by the inverse of the summed
    world covariances. Jacobian keys: 0 -> s_j, 1 -> s_k.
    """
    for s in (s_j, s_k):
        require = np.concatenate([s.pose.translation, s.velocity_w])
        if not np.all(np.isfinite(require)):
            raise InvalidArgumentError("keyframe state contains non-finite values")

    body_j = ext.radar_in_body.apply(np.asarray(c.p_fj, dtype=np.float64))
    body_k = ext.radar_in_body.apply(np.asarray(c.p_fk, dtype=np.float64))
    Rj = s_j.pose.rotation.matrix()
    Rk = s_k.pose.rotation.matrix()
    rot_j = Rj @ body_j
    rot_k = Rk @ body_k
    pw_j = rot_j + s_j.pose.translation
    pw_k = rot_k + s_k.pose.translation
    residual = pw_j - pw_k

    R_br = ext.radar_in_body.rotation.matrix()
    Cw = world_covariance(Rj @ R_br, c.C_fj) + world_covariance(Rk @ R_br, c.C_fk)
    S = sqrt_information(Cw)

    Jj = np.zeros((3, TANGENT_DIM))
    Jk = np.zeros((3, TANGENT_DIM))
    Jj[:, ROT] = -skew(rot_j)
    Jj[:, TRANS] = np.eye(3)
    Jk[:, ROT] = skew(rot_k)
    Jk[:, TRANS] = -np.eye(3)
    return FactorBlock(residual, {0: Jj, 1: Jk}, S)
