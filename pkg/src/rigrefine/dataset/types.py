"""Dataset containers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import UnknownSensor
from ..geometry import Pose, Trajectory
from ..rig import RigCalibration

PROVENANCES = ("synthetic-gt", "perturbed", "external")
LIDAR_MIN_RANGE = 0.5
LIDAR_MAX_RANGE = 200.0


@dataclass(frozen=True, eq=False)
class SensorFrame:
    """One camera image (optionally masked) or one lidar scan.

    ``image`` is (H, W, 3) in [0, 1]; ``mask`` is (H, W) bool with True marking
    dynamic pixels. ``points`` are sensor-frame lidar returns, float32.
    ``gt_ranges`` keeps the exact (unquantized) ranges of synthetic scans; it
    is never written to disk.
    """

    sensor: str
    timestamp: float
    image: np.ndarray | None = None
    mask: np.ndarray | None = None
    points: np.ndarray | None = None
    gt_ranges: np.ndarray | None = None

    def __post_init__(self):
        if (self.image is None) == (self.points is None):
            raise ValueError("a frame carries exactly one of image or points")
        if self.image is not None:
            img = self.image
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValueError("image must be (H, W, 3)")
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise ValueError("image values must lie in [0, 1]")
            if self.mask is not None and self.mask.shape != img.shape[:2]:
                raise ValueError("mask shape must match the image")
        else:
            pts = self.points
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError("points must be (N, 3)")
            r = np.linalg.norm(pts.astype(float), axis=1)
            if r.size and (r.min() <= LIDAR_MIN_RANGE or r.max() >= LIDAR_MAX_RANGE):
                raise ValueError("lidar point norms must lie in (0.5, 200) m")

    @property
    def kind(self) -> str:
        return "camera" if self.image is not None else "lidar"


@dataclass(frozen=True)
class KeypointTrack:
    """Pixel observations (sensor, timestamp, u, v) of one landmark."""

    track_id: int
    observations: tuple  # of (sensor, t, u, v)

    def __post_init__(self):
        if len(self.observations) < 2:
            raise ValueError("a track needs at least 2 observations")


@dataclass(eq=False)
class SceneDataset:
    rig: RigCalibration
    trajectory: Trajectory
    frames: dict  # sensor id -> time-sorted list[SensorFrame]
    provenance: str = "synthetic-gt"
    name: str = "scene"
    tracks: list = field(default_factory=list)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        t0, t1 = self.trajectory.t_min, self.trajectory.t_max
        frames = {}
        for sid, lst in self.frames.items():
            if sid not in self.rig:
                raise UnknownSensor(f"frames reference unknown sensor {sid!r}")
            lst = sorted(lst, key=lambda f: f.timestamp)
            for f in lst:
                if f.sensor != sid:
                    raise ValueError("frame filed under the wrong sensor")
                if not t0 <= f.timestamp <= t1:
                    raise ValueError(f"frame time {f.timestamp} outside trajectory range [{t0}, {t1}]")
            frames[sid] = lst
        self.frames = frames

    def all_frames(self) -> list[SensorFrame]:
        out = [f for sid in self.rig.ids for f in self.frames.get(sid, [])]
        return out

    def camera_frames(self) -> list[SensorFrame]:
        return [f for sid in self.rig.cameras for f in self.frames.get(sid, [])]

    def lidar_frames(self) -> list[SensorFrame]:
        return [f for sid in self.rig.lidars for f in self.frames.get(sid, [])]

    @property
    def n_frames(self) -> int:
        return sum(len(v) for v in self.frames.values())

    def with_poses(self, rig: RigCalibration | None = None, trajectory: Trajectory | None = None,
                   provenance: str | None = None) -> "SceneDataset":
        """Same measurements under a different rig/trajectory."""
        return replace(
            self,
            rig=rig or self.rig,
            trajectory=trajectory or self.trajectory,
            provenance=provenance or self.provenance,
        )


@dataclass
class NoiseSpec:
    """Pose noise to inject.

    Extrinsic noise is per-axis uniform within the bounds (``mode="uniform"``)
    or a random direction of exactly the bound magnitude (``mode="sphere"``).
    Trajectory noise is a smooth sinusoid of arc length plus per-knot jitter.
    """

    ext_translation_m: float = 0.0
    ext_rotation_deg: float = 0.0
    ext_mode: str = "uniform"
    traj_amplitude_m: float = 0.0
    traj_amplitude_deg: float = 0.0
    traj_frequency: float = 0.1  # cycles per meter of arc length
    traj_jitter_m: float = 0.0
    seed: int = 0

    def __post_init__(self):
        mags = (self.ext_translation_m, self.ext_rotation_deg, self.traj_amplitude_m, self.traj_amplitude_deg,
                self.traj_frequency, self.traj_jitter_m)
        if any(m < 0 for m in mags):
            raise ValueError("noise magnitudes must be non-negative")
        if self.ext_mode not in ("uniform", "sphere"):
            raise ValueError("ext_mode must be 'uniform' or 'sphere'")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def is_zero(self) -> bool:
        return not any((self.ext_translation_m, self.ext_rotation_deg, self.traj_amplitude_m,
                        self.traj_amplitude_deg, self.traj_jitter_m))


@dataclass(eq=False)
class GroundTruthRecord:
    """Unperturbed rig and trajectory plus the injected noise.

    Perturbed extrinsic = ``gt_extrinsic @ ext_noise[s]``; perturbed knot
    ``k`` = ``gt_knot @ traj_noise[k]``.
    """

    rig: RigCalibration
    trajectory: Trajectory
    ext_noise: dict = field(default_factory=dict)  # sensor -> Pose
    traj_noise: list = field(default_factory=list)  # per knot Pose

    def apply(self, rig: RigCalibration, traj: Trajectory) -> tuple[RigCalibration, Trajectory]:
        """Undo the recorded noise on a perturbed (rig, trajectory)."""
        ext = {s: rig.extrinsic(s) @ self.ext_noise[s].inverse() for s in self.ext_noise}
        if self.traj_noise:
            traj = traj.map_poses(lambda k, p: p @ self.traj_noise[k].inverse())
        return rig.with_extrinsics(ext), traj
