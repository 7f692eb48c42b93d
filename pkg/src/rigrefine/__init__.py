"""Joint refinement of multi-sensor rig extrinsics and trajectories by differentiable volume rendering."""

from ._native import BACKEND
from .corrections import CorrectionSet, TrajectoryCorrectionNet, apply_corrections
from .geometry import Pose, Trajectory, distance
from .rig import CameraIntrinsics, RigCalibration, Sensor

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CameraIntrinsics", "CorrectionSet", "Pose", "RigCalibration", "Sensor", "Trajectory",
    "TrajectoryCorrectionNet", "__version__", "apply_corrections", "distance",
]
