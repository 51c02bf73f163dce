"""radarba: offline bundle-adjustment toolkit for 4D radar mapping.

Refines a radar--inertial trajectory by jointly optimizing keyframe states
against multi-frame covariance-weighted point constraints, IMU
preintegration, and radar ego-velocity factors, then recovers all frame
poses by pose-graph optimization and evaluates trajectory and map quality.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .core import Extrinsics, KeyframeState, Pose, RadarFrame, Rotation

__all__ = [
    "Extrinsics",
    "KeyframeState",
    "Pose",
    "RadarFrame",
    "Rotation",
    "RunConfig",
    "__version__",
]
