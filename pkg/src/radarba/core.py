"""Geometric primitives: SO(3) utilities, rigid poses, and estimation states.

Conventions used throughout the toolkit:

* World frame is z-up; gravity defaults to (0, 0, -9.81) m/s^2.
* Rotations are stored as unit quaternions in (x, y, z, w) order and
  renormalized after every composition.
* State corrections use the tangent ordering [rotation, translation,
  velocity, gyro bias, accel bias]; the rotation block is applied by
  exponential-map left composition (R <- Exp(d) R) and everything else
  additively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError

# Tangent layout per state: [rot(3), trans(3), vel(3), bg(3), ba(3)].
TANGENT_DIM = 15
POSE_DIM = 6
ROT = slice(0, 3)
TRANS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)

_SMALL_ANGLE = 1e-8


def as_vec3(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise InvalidArgumentError(f"{name} must be a 3-vector, got shape {v.shape}")
    return v


def require_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return x


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix of v."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """(N,3) -> (N,3,3) cross-product matrices."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def exp_so3(w) -> np.ndarray:
    """Rodrigues formula: rotation vector (rad) -> 3x3 rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < _SMALL_ANGLE**2:
        # second-order series keeps exp/log roundtrips exact near zero
        return np.eye(3) + W + 0.5 * (W @ W)
    theta = math.sqrt(theta2)
    W2 = W @ W
    return np.eye(3) + (math.sin(theta) / theta) * W + ((1.0 - math.cos(theta)) / theta2) * W2


def exp_so3_batch(w: np.ndarray) -> np.ndarray:
    """(N,3) rotation vectors -> (N,3,3) rotation matrices."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.einsum("ni,ni->n", w, w)
    theta = np.sqrt(theta2)
    W = skew_batch(w)
    W2 = np.einsum("nij,njk->nik", W, W)
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    return np.eye(3)[None] + a[:, None, None] * W + b[:, None, None] * W2


def quat_xyzw_from_matrix_batch(R: np.ndarray) -> np.ndarray:
    """(N,3,3) rotation matrices -> (N,4) unit quaternions, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    m00, m01, m02 = R[:, 0, 0], R[:, 0, 1], R[:, 0, 2]
    m10, m11, m12 = R[:, 1, 0], R[:, 1, 1], R[:, 1, 2]
    m20, m21, m22 = R[:, 2, 0], R[:, 2, 1], R[:, 2, 2]
    t = np.stack(
        [
            1.0 + m00 + m11 + m22,
            1.0 + m00 - m11 - m22,
            1.0 - m00 + m11 - m22,
            1.0 - m00 - m11 + m22,
        ],
        axis=1,
    )
    choice = np.argmax(t, axis=1)
    s = 2.0 * np.sqrt(np.maximum(t[np.arange(len(R)), choice], 1e-30))
    q = np.empty((len(R), 4))
    c0, c1, c2, c3 = (choice == 0), (choice == 1), (choice == 2), (choice == 3)
    q[c0, 3] = 0.25 * s[c0]
    q[c0, 0] = (m21[c0] - m12[c0]) / s[c0]
    q[c0, 1] = (m02[c0] - m20[c0]) / s[c0]
    q[c0, 2] = (m10[c0] - m01[c0]) / s[c0]
    q[c1, 0] = 0.25 * s[c1]
    q[c1, 3] = (m21[c1] - m12[c1]) / s[c1]
    q[c1, 1] = (m01[c1] + m10[c1]) / s[c1]
    q[c1, 2] = (m02[c1] + m20[c1]) / s[c1]
    q[c2, 1] = 0.25 * s[c2]
    q[c2, 3] = (m02[c2] - m20[c2]) / s[c2]
    q[c2, 0] = (m01[c2] + m10[c2]) / s[c2]
    q[c2, 2] = (m12[c2] + m21[c2]) / s[c2]
    q[c3, 2] = 0.25 * s[c3]
    q[c3, 3] = (m10[c3] - m01[c3]) / s[c3]
    q[c3, 0] = (m02[c3] + m20[c3]) / s[c3]
    q[c3, 1] = (m12[c3] + m21[c3]) / s[c3]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector with angle in [0, pi].

    Goes through the quaternion representation, which stays accurate near
    both 0 and pi.
    """
    return log_so3_batch(np.asarray(R, dtype=np.float64)[None])[0]


def log_so3_batch(R: np.ndarray) -> np.ndarray:
    q = quat_xyzw_from_matrix_batch(R)
    return quat_log_batch(q)


def quat_log_batch(q: np.ndarray) -> np.ndarray:
    """(N,4) xyzw unit quaternions -> (N,3) rotation vectors."""
    q = np.where(q[:, 3:4] < 0.0, -q, q)
    v = q[:, :3]
    s = np.linalg.norm(v, axis=1)
    w = q[:, 3]
    theta = 2.0 * np.arctan2(s, w)
    small = s < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), theta / np.where(small, 1.0, s))
    return v * scale[:, None]


def right_jacobian(w) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(w + d) ~= Exp(w) Exp(Jr(w) d)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    W = skew(w)
    W2 = W @ W
    if theta2 < _SMALL_ANGLE**2:
        return np.eye(3) - 0.5 * W + W2 / 6.0
    theta = math.sqrt(theta2)
    a = (1.0 - math.cos(theta)) / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * W + b * W2


def right_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    W = skew(w)
    W2 = W @ W
    if theta2 < _SMALL_ANGLE**2:
        return np.eye(3) + 0.5 * W + W2 / 12.0
    theta = math.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * W + c * W2


def right_jacobian_inv_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.einsum("ni,ni->n", w, w)
    theta = np.sqrt(theta2)
    W = skew_batch(w)
    W2 = np.einsum("nij,njk->nik", W, W)
    small = theta < 1e-5
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(
            small,
            1.0 / 12.0 + theta2 / 720.0,
            (1.0 / np.where(small, 1.0, theta2))
            - (1.0 + np.cos(theta)) / np.where(small, 1.0, 2.0 * theta * np.sin(theta)),
        )
    return np.eye(3)[None] + 0.5 * W + c[:, None, None] * W2


class Rotation:
    """Element of SO(3) stored as a unit quaternion (x, y, z, w)."""

    __slots__ = ("_q",)

    def __init__(self, quat_xyzw):
        q = np.asarray(quat_xyzw, dtype=np.float64)
        if q.shape != (4,):
            raise InvalidArgumentError(f"quaternion must have shape (4,), got {q.shape}")
        n = float(np.linalg.norm(q))
        if not math.isfinite(n) or n < 1e-12:
            raise InvalidArgumentError("quaternion norm is zero or non-finite")
        self._q = q / n

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([0.0, 0.0, 0.0, 1.0]))

    @staticmethod
    def from_matrix(R) -> "Rotation":
        return Rotation(quat_xyzw_from_matrix_batch(np.asarray(R, dtype=np.float64)[None])[0])

    @staticmethod
    def from_axis_angle(w) -> "Rotation":
        """Exponential map: rotation vector (rad) -> Rotation."""
        w = np.asarray(w, dtype=np.float64)
        theta = float(np.linalg.norm(w))
        if theta < _SMALL_ANGLE:
            half = 0.5 - theta * theta / 48.0
            return Rotation(np.array([w[0] * half, w[1] * half, w[2] * half, 1.0 - theta * theta / 8.0]))
        axis = w / theta
        s = math.sin(0.5 * theta)
        return Rotation(np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * theta)]))

    @property
    def quat_xyzw(self) -> np.ndarray:
        return self._q.copy()

    def matrix(self) -> np.ndarray:
        x, y, z, w = self._q
        xx, yy, zz = x * x, y * y, z * z
        xy, xz, yz = x * y, x * z, y * z
        wx, wy, wz = w * x, w * y, w * z
        return np.array(
            [
                [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
                [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
                [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
            ]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate one (3,) point or a stack (..., 3) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix().T

    def compose(self, other: "Rotation") -> "Rotation":
        x1, y1, z1, w1 = self._q
        x2, y2, z2, w2 = other._q
        return Rotation(
            np.array(
                [
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                ]
            )
        )

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        x, y, z, w = self._q
        return Rotation(np.array([-x, -y, -z, w]))

    def log(self) -> np.ndarray:
        """Rotation vector (rad), angle in [0, pi]."""
        return quat_log_batch(self._q[None])[0]

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return float(np.linalg.norm(self.log()))

    def __repr__(self) -> str:
        return f"Rotation(xyzw={np.array2string(self._q, precision=6)})"


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_out = rotation * x_in + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", as_vec3(self.translation, "translation"))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(Rotation.from_matrix(R), np.asarray(t, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation.apply(other.translation) + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose inverse(a) o b, i.e. b expressed in a's frame."""
    return a.inverse().compose(b)


def pose_log(p: Pose) -> np.ndarray:
    """6-vector (Log(R), t); zero iff p is the identity."""
    return np.concatenate([p.rotation.log(), p.translation])


def pose_retract(p: Pose, delta: np.ndarray) -> Pose:
    """Left-composed update: (Exp(d_rot) R, t + d_trans)."""
    delta = np.asarray(delta, dtype=np.float64)
    rot = p.rotation if not delta[:3].any() else Rotation.from_axis_angle(delta[:3]) @ p.rotation
    return Pose(rot, p.translation + delta[3:6])


def pose_local(a: Pose, b: Pose) -> np.ndarray:
    """Inverse of pose_retract: delta with pose_retract(a, delta) == b."""
    return np.concatenate([(b.rotation @ a.rotation.inverse()).log(), b.translation - a.translation])


def rotation_angle_between(a: Rotation, b: Rotation) -> float:
    """Geodesic angle (rad) between two rotations."""
    return (a.inverse() @ b).angle()


@dataclass(frozen=True)
class KeyframeState:
    """Optimized unknowns of one keyframe: body pose in world, world velocity,
    and IMU biases."""

    pose: Pose
    velocity_w: np.ndarray
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    timestamp: float
    frame_id: int

    def __post_init__(self):
        object.__setattr__(self, "velocity_w", as_vec3(self.velocity_w, "velocity_w"))
        object.__setattr__(self, "bias_gyro", as_vec3(self.bias_gyro, "bias_gyro"))
        object.__setattr__(self, "bias_accel", as_vec3(self.bias_accel, "bias_accel"))

    @staticmethod
    def at_rest(pose: Pose, timestamp: float = 0.0, frame_id: int = 0) -> "KeyframeState":
        return KeyframeState(pose, np.zeros(3), np.zeros(3), np.zeros(3), timestamp, frame_id)


def retract(state: KeyframeState, delta: np.ndarray) -> KeyframeState:
    """Apply a 15-dim tangent correction; see module docstring for layout."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (TANGENT_DIM,):
        raise InvalidArgumentError(f"tangent must have shape ({TANGENT_DIM},), got {delta.shape}")
    return replace(
        state,
        pose=pose_retract(state.pose, delta[:6]),
        velocity_w=state.velocity_w + delta[VEL],
        bias_gyro=state.bias_gyro + delta[BG],
        bias_accel=state.bias_accel + delta[BA],
    )


def local_coordinates(a: KeyframeState, b: KeyframeState) -> np.ndarray:
    """Inverse of retract: delta with retract(a, delta) == b."""
    return np.concatenate(
        [
            pose_local(a.pose, b.pose),
            b.velocity_w - a.velocity_w,
            b.bias_gyro - a.bias_gyro,
            b.bias_accel - a.bias_accel,
        ]
    )


@dataclass(frozen=True)
class Extrinsics:
    """Radar mounting pose in the body frame plus the world gravity vector."""

    radar_in_body: Pose
    gravity_w: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        object.__setattr__(self, "gravity_w", as_vec3(self.gravity_w, "gravity_w"))

    @staticmethod
    def identity(gravity_magnitude: float = 9.81) -> "Extrinsics":
        return Extrinsics(Pose.identity(), np.array([0.0, 0.0, -gravity_magnitude]))


def transform_radar_point(state: KeyframeState, ext: Extrinsics, p_r: np.ndarray) -> np.ndarray:
    """Map radar-frame point(s) to the world frame through body pose and
    radar extrinsics: R_WB (R_BR p + p_BR) + t_WB. Accepts (3,) or (N,3)."""
    p = np.asarray(p_r, dtype=np.float64)
    require_finite(p, "radar point")
    body = ext.radar_in_body.apply(p)
    return state.pose.apply(body)


@dataclass(frozen=True)
class RadarFrame:
    """One undistorted radar scan: stationary points in the sensor frame plus
    the measured ego velocity (with covariance) and the raw gyro rate at the
    frame time. Velocity fields are None when the stream does not supply them.
    """

    frame_id: int
    timestamp: float
    points: np.ndarray
    ego_velocity: np.ndarray | None = None
    ego_covariance: np.ndarray | None = None
    omega_body_raw: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass
class PoseTrajectory:
    """Timestamped pose sequence in array form (rotations as matrices)."""

    times: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray

    @staticmethod
    def from_poses(times: Iterable[float], poses: Sequence[Pose]) -> "PoseTrajectory":
        times = np.asarray(list(times), dtype=np.float64)
        R = np.stack([p.rotation.matrix() for p in poses]) if len(poses) else np.zeros((0, 3, 3))
        t = np.stack([p.translation for p in poses]) if len(poses) else np.zeros((0, 3))
        return PoseTrajectory(times, R, t)

    def pose(self, i: int) -> Pose:
        return Pose(Rotation.from_matrix(self.rotations[i]), self.positions[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self.times))]

    def __len__(self) -> int:
        return len(self.times)
