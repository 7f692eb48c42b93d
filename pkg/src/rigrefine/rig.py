"""Sensor rig description: extrinsics relative to the reference sensor and camera intrinsics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MissingIntrinsics, UnknownSensor
from .geometry import Pose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downscaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the image block-averaged by ``factor`` (pixel-center convention)."""
        if factor == 1:
            return self
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points (z forward) to pixels."""
        p = np.asarray(points_cam, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)

    def pixel_directions(self) -> np.ndarray:
        """Unit camera-frame ray directions through every pixel center, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Sensor:
    id: str
    kind: str  # "camera" | "lidar"
    extrinsic: Pose  # reference <- sensor
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        if self.kind not in ("camera", "lidar"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")


@dataclass(frozen=True)
class RigCalibration:
    sensors: tuple[Sensor, ...]
    reference: str
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        sensors = tuple(self.sensors)
        object.__setattr__(self, "sensors", sensors)
        ids = [s.id for s in sensors]
        if len(set(ids)) != len(ids):
            raise ValueError("sensor ids must be unique")
        index = {s.id: s for s in sensors}
        if self.reference not in index:
            raise UnknownSensor(f"reference sensor {self.reference!r} not in rig")
        if not index[self.reference].extrinsic.allclose(Pose.identity(), atol=1e-12):
            raise ValueError("reference sensor extrinsic must be identity")
        object.__setattr__(self, "_index", index)

    def __contains__(self, sensor_id: str) -> bool:
        return sensor_id in self._index

    def sensor(self, sensor_id: str) -> Sensor:
        try:
            return self._index[sensor_id]
        except KeyError:
            raise UnknownSensor(f"unknown sensor {sensor_id!r}") from None

    def extrinsic(self, sensor_id: str) -> Pose:
        return self.sensor(sensor_id).extrinsic

    def intrinsics(self, sensor_id: str) -> CameraIntrinsics:
        s = self.sensor(sensor_id)
        if s.intrinsics is None:
            raise MissingIntrinsics(f"sensor {sensor_id!r} has no intrinsics")
        return s.intrinsics

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sensors]

    @property
    def cameras(self) -> list[str]:
        return [s.id for s in self.sensors if s.kind == "camera"]

    @property
    def lidars(self) -> list[str]:
        return [s.id for s in self.sensors if s.kind == "lidar"]

    def with_extrinsics(self, extrinsics: dict[str, Pose]) -> "RigCalibration":
        sensors = tuple(replace(s, extrinsic=extrinsics.get(s.id, s.extrinsic)) for s in self.sensors)
        return RigCalibration(sensors, self.reference)

    def same_layout(self, other: "RigCalibration") -> bool:
        """True when both rigs describe the same sensors (ids, kinds, intrinsics, reference)."""
        if self.reference != other.reference or self.ids != other.ids:
            return False
        return all(a.kind == b.kind and a.intrinsics == b.intrinsics for a, b in zip(self.sensors, other.sensors))
