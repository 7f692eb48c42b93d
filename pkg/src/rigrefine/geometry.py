"""Rigid transforms, quaternion interpolation and the sensor pose chain.

Conventions
-----------
* A :class:`Pose` maps points FROM the named sensor/body frame INTO the world
  frame: ``p_world = R @ p_sensor + t``.
* Quaternions are scalar-first ``(w, x, y, z)`` and always unit norm.
* The pose of sensor ``i`` at time ``t`` is ``traj(t) @ X_ref<-i``; with learned
  corrections it becomes ``traj(t) @ d_traj(t) @ X_ref<-i @ d_ext(i)``.

The scalar API works on :class:`Pose` objects; the ``*_batch`` helpers work on
stacked arrays and are what the optimizer uses in its inner loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AngleOutOfRange, TimeOutOfRange, UnknownSensor

SMALL_ANGLE = 1e-8
SLERP_LERP_THRESHOLD = 1.0 - 1e-6

_IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


# --------------------------------------------------------------------------
# quaternion primitives (broadcast over leading axes)
# --------------------------------------------------------------------------


def quat_mul(a, b):
    """Hamilton product ``a * b`` over trailing axis of size 4."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    """Normalize, leaving quaternions that are already unit to machine precision untouched."""
    q = np.asarray(q, dtype=float)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    needs = np.abs(n2 - 1.0) > 1e-14
    if not np.any(needs):
        return q
    return np.where(needs, q / np.sqrt(n2), q)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion (Shepperd's method), w >= 0."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[k] = q / np.linalg.norm(q)
    return out.reshape(m.shape[:-2] + (4,))


def rodrigues_exp(omega) -> np.ndarray:
    """Axis-angle vector to unit quaternion.

    Raises :class:`AngleOutOfRange` for ``|omega| >= pi``; corrections are
    expected to be small and the map is not injective past that point.
    """
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    if not theta < math.pi:
        raise AngleOutOfRange(f"rotation angle {theta} rad is not below pi")
    if theta < SMALL_ANGLE:
        w = 1.0 - theta2 / 8.0
        s = 0.5 - theta2 / 48.0
    else:
        w = math.cos(0.5 * theta)
        s = math.sin(0.5 * theta) / theta
    return quat_normalize(np.array([w, s * omega[0], s * omega[1], s * omega[2]]))


def rodrigues_exp_batch(omega) -> np.ndarray:
    """Vectorized :func:`rodrigues_exp` for an (N, 3) array."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    if np.any(~(theta < math.pi)):
        raise AngleOutOfRange("rotation angle is not below pi")
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    w = np.where(small, 1.0 - theta2 / 8.0, np.cos(0.5 * theta))
    s = np.where(small, 0.5 - theta2 / 48.0, np.sin(0.5 * safe) / safe)
    q = np.concatenate([w[..., None], s[..., None] * omega], axis=-1)
    return quat_normalize(q)


def quat_log(q) -> np.ndarray:
    """Unit quaternion to axis-angle vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float).reshape(4)
    if q[0] < 0:
        q = -q
    v = q[1:]
    vn = float(np.linalg.norm(v))
    if vn < 1e-12:
        return 2.0 * v / q[0]
    theta = 2.0 * math.atan2(vn, q[0])
    return theta * v / vn


def rotation_angle(q) -> float:
    """Angle in radians of the rotation represented by ``q``."""
    q = np.asarray(q, dtype=float)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def slerp(q0, q1, u: float) -> np.ndarray:
    """Geodesic interpolation between two unit quaternions.

    Takes the short path (``q1`` is negated when the dot product is negative)
    and falls back to normalized lerp when the two are nearly parallel.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if u == 0.0:
        return q0.copy()
    d = float(q0 @ q1)
    if d < 0.0:
        q1 = -q1
        d = -d
    if u == 1.0:
        return q1.copy()
    if d > SLERP_LERP_THRESHOLD:
        q = q0 + u * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(d, 1.0))
    st = math.sin(theta)
    q = (math.sin((1.0 - u) * theta) / st) * q0 + (math.sin(u * theta) / st) * q1
    return quat_normalize(q)


def slerp_batch(q0, q1, u) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    u = np.asarray(u, dtype=float)[..., None]
    d = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(d < 0, -q1, q1)
    d = np.abs(d)
    near = d > SLERP_LERP_THRESHOLD
    theta = np.arccos(np.clip(d, -1.0, 1.0))
    st = np.where(near, 1.0, np.sin(theta))
    a = np.where(near, 1.0 - u, np.sin((1.0 - u) * theta) / st)
    b = np.where(near, u, np.sin(u * theta) / st)
    q = a * q0 + b * q1
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform sensor -> world; rotation quaternion (w, x, y, z) + translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        t = np.array(self.translation, dtype=float).reshape(3)
        n = float(np.linalg.norm(q))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = quat_normalize(q)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(_IDENTITY_Q, np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_axis_angle(cls, omega, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rodrigues_exp(omega), translation)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        q = quat_mul(self.rotation, other.rotation)
        t = self.translation + self.rotation_matrix @ other.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -(quat_to_matrix(qi) @ self.translation))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix.T + self.translation

    def log_rotation(self) -> np.ndarray:
        return quat_log(self.rotation)

    def angle(self) -> float:
        return rotation_angle(self.rotation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        d = self.inverse() @ other
        return d.angle() <= atol and float(np.linalg.norm(d.translation)) <= atol

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.rotation, 9).tolist()}, t={np.round(self.translation, 9).tolist()})"


def distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation m, rotation rad) of the relative transform ``a^-1 b``."""
    d = a.inverse() @ b
    return float(np.linalg.norm(d.translation)), d.angle()


# --------------------------------------------------------------------------
# Trajectory
# --------------------------------------------------------------------------


class Trajectory:
    """Time-indexed reference-sensor poses, interpolated by lerp + SLERP."""

    def __init__(self, times, rotations, translations, reference_sensor: str):
        times = np.array(times, dtype=float).reshape(-1)
        rotations = np.array(rotations, dtype=float).reshape(-1, 4)
        translations = np.array(translations, dtype=float).reshape(-1, 3)
        if times.size < 2:
            raise ValueError("a trajectory needs at least 2 knots")
        if not (rotations.shape[0] == translations.shape[0] == times.size):
            raise ValueError("knot arrays disagree in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("knot timestamps must be strictly increasing")
        rotations = quat_normalize(rotations)
        for a in (times, rotations, translations):
            a.flags.writeable = False
        self.times = times
        self.rotations = rotations
        self.translations = translations
        self.reference_sensor = reference_sensor

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Sequence[Pose], reference_sensor: str) -> "Trajectory":
        return cls(
            times,
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
            reference_sensor,
        )

    def __len__(self) -> int:
        return self.times.size

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def knot(self, k: int) -> Pose:
        return Pose(self.rotations[k], self.translations[k])

    def poses(self) -> list[Pose]:
        return [self.knot(k) for k in range(len(self))]

    def _check(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(~((t >= self.times[0]) & (t <= self.times[-1]))):
            raise TimeOutOfRange(
                f"time outside trajectory range [{self.times[0]}, {self.times[-1]}]"
            )

    def interpolate(self, t: float) -> Pose:
        self._check(t)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if self.times[k] == t:
            return self.knot(k)
        u = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        q = slerp(self.rotations[k], self.rotations[k + 1], u)
        p = self.translations[k] + u * (self.translations[k + 1] - self.translations[k])
        return Pose(q, p)

    def interpolate_batch(self, ts) -> tuple[np.ndarray, np.ndarray]:
        """Return stacked (quaternions (N,4), translations (N,3)) at times ``ts``."""
        ts = np.asarray(ts, dtype=float).reshape(-1)
        self._check(ts)
        k = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0, len(self) - 2)
        u = (ts - self.times[k]) / (self.times[k + 1] - self.times[k])
        q = slerp_batch(self.rotations[k], self.rotations[k + 1], u)
        p = self.translations[k] + u[:, None] * (self.translations[k + 1] - self.translations[k])
        exact = ts == self.times[k]
        q[exact] = self.rotations[k[exact]]
        p[exact] = self.translations[k[exact]]
        end = ts == self.times[-1]
        q[end] = self.rotations[-1]
        p[end] = self.translations[-1]
        return q, p

    def matrices(self, ts) -> np.ndarray:
        q, p = self.interpolate_batch(ts)
        m = np.tile(np.eye(4), (q.shape[0], 1, 1))
        m[:, :3, :3] = quat_to_matrix(q)
        m[:, :3, 3] = p
        return m

    def arc_length(self) -> np.ndarray:
        """Cumulative translation arc length at each knot (starts at 0)."""
        seg = np.linalg.norm(np.diff(self.translations, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def slice(self, t0: float, t1: float) -> "Trajectory":
        """Knots in [t0, t1] inclusive."""
        sel = (self.times >= t0) & (self.times <= t1)
        return Trajectory(self.times[sel], self.rotations[sel], self.translations[sel], self.reference_sensor)

    def map_poses(self, fn) -> "Trajectory":
        """New trajectory with ``fn(k, pose)`` applied to every knot."""
        poses = [fn(k, p) for k, p in enumerate(self.poses())]
        return Trajectory.from_poses(self.times, poses, self.reference_sensor)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    return traj.interpolate(t)


# --------------------------------------------------------------------------
# pose chain
# --------------------------------------------------------------------------


def sensor_pose(calib, traj: Trajectory, sensor: str, t: float) -> Pose:
    """World pose of ``sensor`` at ``t``: ``traj(t) @ X_ref<-sensor``."""
    extrinsic = calib.extrinsic(sensor)
    ref_pose = traj.interpolate(t)
    if sensor == calib.reference:
        return ref_pose
    return ref_pose @ extrinsic


def corrected_sensor_pose(corr, calib, traj: Trajectory, sensor: str, t: float, scene: str | None = None) -> Pose:
    """``traj(t) @ d_traj(t) @ X_ref<-sensor @ d_ext(sensor)``.

    With both corrections at identity the result is bit-identical to
    :func:`sensor_pose`.
    """
    extrinsic = calib.extrinsic(sensor)
    ref_pose = traj.interpolate(t)
    d_traj = corr.trajectory_pose(scene, t)
    d_ext = corr.extrinsic_pose(sensor)
    body = ref_pose @ d_traj
    if sensor == calib.reference:
        return body @ d_ext
    return body @ extrinsic @ d_ext


def compose_matrices(*mats) -> np.ndarray:
    """Batched product of (N,4,4) / (4,4) homogeneous matrices, left to right."""
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return out


def pose_to_matrix(q, t) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    t = np.asarray(t, dtype=float)
    shape = q.shape[:-1]
    m = np.zeros(shape + (4, 4))
    m[..., :3, :3] = quat_to_matrix(q)
    m[..., :3, 3] = t
    m[..., 3, 3] = 1.0
    return m


def unknown_sensor(sensor: str) -> UnknownSensor:
    return UnknownSensor(f"unknown sensor {sensor!r}")
