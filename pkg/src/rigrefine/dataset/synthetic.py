"""Synthetic rig, trajectory, sensor capture and keypoint tracks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import TimeOutOfRange
from ..geometry import Pose, Trajectory, matrix_to_quat, sensor_pose
from ..rig import CameraIntrinsics, RigCalibration, Sensor
from .types import LIDAR_MAX_RANGE, LIDAR_MIN_RANGE, KeypointTrack, SceneDataset, SensorFrame
from .world import SyntheticWorld

# camera axes: x right, y down, z forward; vehicle/lidar axes: x forward, y left, z up
_CAM_FROM_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
CAMERA_LAYOUT = (("cam_front", 0.0), ("cam_left", 90.0), ("cam_rear", 180.0), ("cam_right", -90.0))


@dataclass
class LidarSpec:
    rings: int = 16
    azimuth_steps: int = 720
    fov_deg: tuple = (-15.0, 15.0)
    rate_hz: float = 10.0
    max_range: float = 100.0

    def directions(self) -> np.ndarray:
        """Unit beam directions in the lidar frame, ring-major (rings * steps, 3)."""
        el = np.radians(np.linspace(self.fov_deg[0], self.fov_deg[1], self.rings))
        az = 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        el, az = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class TrajectorySpec:
    duration: float = 8.0
    speed: float = 5.0
    radius: float = 7.0
    radius_wobble: float = 0.8
    height: float = 1.9
    knot_rate_hz: float = 10.0
    tilt_deg: float = 1.5
    start_angle: float = 0.0


def default_rig(image_size: int = 256, fov_deg: float = 110.0, n_cameras: int = 4,
                mount_offset: float = 0.35, mount_drop: float = 0.25) -> RigCalibration:
    """Lidar reference plus up to four outward-looking cameras (front, left, rear, right)."""
    if not 1 <= n_cameras <= len(CAMERA_LAYOUT):
        raise ValueError("n_cameras must be in 1..4")
    f = (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    c = (image_size - 1) / 2.0
    intr = CameraIntrinsics(f, f, c, c, image_size, image_size)
    sensors = [Sensor("lidar", "lidar", Pose.identity())]
    for sid, yaw in CAMERA_LAYOUT[:n_cameras]:
        rz = Rotation.from_euler("z", yaw, degrees=True).as_matrix()
        rot = rz @ _CAM_FROM_BODY
        pos = rz @ np.array([mount_offset, 0.0, -mount_drop])
        sensors.append(Sensor(sid, "camera", Pose(matrix_to_quat(rot), pos), intr))
    return RigCalibration(tuple(sensors), "lidar")


def generate_trajectory(spec: TrajectorySpec | None = None, seed: int = 0, reference: str = "lidar") -> Trajectory:
    """Constant-speed drive around a wobbly ring with mild roll/pitch and bounce."""
    spec = spec or TrajectorySpec()
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 6)
    n_knots = int(round(spec.duration * spec.knot_rate_hz)) + 1
    times = np.arange(n_knots) / spec.knot_rate_hz

    def ring(th):
        r = spec.radius + spec.radius_wobble * np.sin(3.0 * th + phase[0])
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)

    # arc-length parametrization on a dense table
    th_dense = spec.start_angle + np.linspace(0.0, 4.0 * np.pi, 40001)
    xy = ring(th_dense)
    s_dense = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    s = spec.speed * times
    if s[-1] > s_dense[-1]:
        raise ValueError("trajectory too long for two laps of the ring")
    th = np.interp(s, s_dense, th_dense)
    pos_xy = ring(th)
    eps = 1e-6
    tangent = ring(th + eps) - ring(th - eps)
    yaw = np.arctan2(tangent[:, 1], tangent[:, 0])
    tilt = np.radians(spec.tilt_deg)
    roll = tilt * np.sin(0.7 * times + phase[1]) * np.cos(0.31 * times + phase[2])
    pitch = tilt * np.sin(0.53 * times + phase[3])
    z = spec.height + 0.05 * np.sin(1.1 * times + phase[4])
    rot = Rotation.from_euler("ZYX", np.stack([yaw, pitch, roll], axis=1)).as_matrix()
    quats = np.stack([matrix_to_quat(m) for m in rot])
    trans = np.column_stack([pos_xy, z])
    return Trajectory(times, quats, trans, reference)


def frame_times(t_min: float, t_max: float, rate_hz: float, midpoint: bool = False) -> np.ndarray:
    """Sample times at ``rate_hz``; with ``midpoint`` each time is the middle of its sweep."""
    n = int(math.floor((t_max - t_min) * rate_hz + 1e-9))
    k = np.arange(n + (0 if midpoint else 1), dtype=float)
    t = t_min + (k + (0.5 if midpoint else 0.0)) / rate_hz
    return t[t <= t_max]


def render_camera(world: SyntheticWorld, pose: Pose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast image (H, W, 3) and z-depth-free hit distance map (H, W) for a camera pose."""
    d_cam = intr.pixel_directions().reshape(-1, 3)
    d_world = d_cam @ pose.rotation_matrix.T
    color, dist = world.render(pose.translation[None], d_world)
    h, w = intr.height, intr.width
    return np.clip(color, 0.0, 1.0).reshape(h, w, 3), dist.reshape(h, w)


def scan_lidar(world: SyntheticWorld, pose: Pose, spec: LidarSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sensor-frame float32 points and exact float64 ranges of one instantaneous sweep."""
    d_l = spec.directions()
    _, dist = world.render(pose.translation[None], d_l @ pose.rotation_matrix.T)
    keep = np.isfinite(dist) & (dist > LIDAR_MIN_RANGE + 1e-3) & (dist < min(spec.max_range, LIDAR_MAX_RANGE - 1.0))
    pts = (d_l[keep] * dist[keep, None]).astype(np.float32)
    return pts, dist[keep]


def capture(world: SyntheticWorld, rig: RigCalibration, trajectory: Trajectory, frame_rate: float = 5.0,
            lidar_spec: LidarSpec | None = None, name: str = "scene", t_range=None) -> SceneDataset:
    """Ray-cast every sensor along the trajectory at exact (uncorrected) poses.

    Cameras fire at ``frame_rate``; lidars at ``lidar_spec.rate_hz`` with each
    scan stamped at its sweep midpoint and treated as instantaneous.
    """
    lidar_spec = lidar_spec or LidarSpec()
    t0, t1 = (trajectory.t_min, trajectory.t_max) if t_range is None else t_range
    if t0 < trajectory.t_min or t1 > trajectory.t_max:
        raise TimeOutOfRange(f"capture window [{t0}, {t1}] outside trajectory")
    frames: dict[str, list[SensorFrame]] = {}
    for sid in rig.cameras:
        intr = rig.intrinsics(sid)
        lst = []
        for t in frame_times(t0, t1, frame_rate):
            img, _ = render_camera(world, sensor_pose(rig, trajectory, sid, float(t)), intr)
            lst.append(SensorFrame(sid, float(t), image=img.astype(np.float32)))
        frames[sid] = lst
    for sid in rig.lidars:
        lst = []
        for t in frame_times(t0, t1, lidar_spec.rate_hz, midpoint=True):
            pts, rng = scan_lidar(world, sensor_pose(rig, trajectory, sid, float(t)), lidar_spec)
            lst.append(SensorFrame(sid, float(t), points=pts, gt_ranges=rng))
        frames[sid] = lst
    return SceneDataset(rig, trajectory, frames, "synthetic-gt", name)


# --------------------------------------------------------------------------
# keypoint tracks
# --------------------------------------------------------------------------


def generate_tracks(world: SyntheticWorld, dataset: SceneDataset, n_landmarks: int = 300, pixel_noise: float = 0.0,
                    seed: int = 0, return_landmarks: bool = False, visibility_tol: float = 1e-4):
    """Project surface landmarks into every camera frame where they are visible.

    Landmarks are hit points of random pixels of random camera frames.
    Observations get isotropic Gaussian pixel noise and must stay inside the
    image; tracks with fewer than two observations are dropped.
    """
    rng = np.random.default_rng(seed)
    rig, traj = dataset.rig, dataset.trajectory
    cam_frames = dataset.camera_frames()
    if not cam_frames or n_landmarks <= 0:
        return ([], np.zeros((0, 3))) if return_landmarks else []
    poses = [sensor_pose(rig, traj, f.sensor, f.timestamp) for f in cam_frames]
    landmarks = []
    while len(landmarks) < n_landmarks:
        k = int(rng.integers(len(cam_frames)))
        intr = rig.intrinsics(cam_frames[k].sensor)
        uv = rng.uniform([0.0, 0.0], [intr.width - 1.0, intr.height - 1.0])
        d = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy, 1.0])
        d = poses[k].rotation_matrix @ (d / np.linalg.norm(d))
        t, pid, _ = world.raycast(poses[k].translation[None], d[None])
        if np.isfinite(t[0]) and t[0] < 30.0:
            landmarks.append(poses[k].translation + t[0] * d)
    landmarks = np.array(landmarks)
    obs: list[list] = [[] for _ in range(len(landmarks))]
    for f, pose in zip(cam_frames, poses):
        intr = rig.intrinsics(f.sensor)
        pc = pose.inverse().apply(landmarks)
        front = pc[:, 2] > 0.1
        uv = intr.project(np.where(front[:, None], pc, 1.0))
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
        idx = np.nonzero(inside)[0]
        if idx.size == 0:
            continue
        vec = landmarks[idx] - pose.translation
        dist = np.linalg.norm(vec, axis=1)
        t_hit, _, _ = world.raycast(np.broadcast_to(pose.translation, vec.shape), vec / dist[:, None])
        visible = t_hit >= dist - visibility_tol
        noise = rng.normal(0.0, pixel_noise, (idx.size, 2)) if pixel_noise > 0 else np.zeros((idx.size, 2))
        for j, i in enumerate(idx):
            if not visible[j]:
                continue
            u, v = uv[i] + noise[j]
            if 0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1:
                obs[i].append((f.sensor, f.timestamp, float(u), float(v)))
    tracks, kept = [], []
    for i, o in enumerate(obs):
        if len(o) >= 2:
            tracks.append(KeypointTrack(len(tracks), tuple(o)))
            kept.append(i)
    if return_landmarks:
        return tracks, landmarks[kept]
    return tracks
