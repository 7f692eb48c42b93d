"""Keypoint-track triangulation with fixed poses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateGeometry
from ..geometry import sensor_pose

OUTLIER_PX = 4.0
PARALLEL_TOL = 1e-9


@dataclass
class TriangulationResult:
    reproj_error: float  # mean over surviving observations, px
    track_length: float  # mean surviving observations per surviving track
    n_tracks: int
    n_degenerate: int
    n_discarded: int

    def __iter__(self):
        # unpacks as (reproj_error, track_length)
        return iter((self.reproj_error, self.track_length))


def projection_matrix(pose, intr) -> np.ndarray:
    """3x4 ``K [R^T | -R^T c]`` of a camera with world pose ``pose``."""
    r = pose.rotation_matrix
    rt = np.concatenate([r.T, (-r.T @ pose.translation)[:, None]], axis=1)
    return intr.matrix() @ rt


def triangulate_dlt(projections: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Linear triangulation from (n, 3, 4) projection matrices and (n, 2) pixels."""
    a = np.concatenate([uv[:, :1] * projections[:, 2] - projections[:, 0],
                        uv[:, 1:] * projections[:, 2] - projections[:, 1]])
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(a)
    x = vt[-1]
    if abs(x[3]) < 1e-300:
        raise DegenerateGeometry("triangulated point at infinity")
    return x[:3] / x[3]


def reprojection_errors(projections: np.ndarray, uv: np.ndarray, x: np.ndarray) -> np.ndarray:
    h = projections @ np.append(x, 1.0)
    err = np.full(uv.shape[0], np.inf)
    front = h[:, 2] > 0
    err[front] = np.linalg.norm(h[front, :2] / h[front, 2:3] - uv[front], axis=1)
    return err


def _check_parallel(poses, rays_cam) -> None:
    d = np.stack([p.rotation_matrix @ r for p, r in zip(poses, rays_cam)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    if np.max(np.linalg.norm(np.cross(d, d[0]), axis=1)) < PARALLEL_TOL:
        raise DegenerateGeometry("all observation rays are parallel")


def triangulate_track(track, poses_fn, intrinsics_fn, threshold: float = OUTLIER_PX):
    """Triangulate one track; returns (point, per-observation errors) of the surviving set or None."""
    obs = list(track.observations)
    cams = [(s, t) for s, t, _, _ in obs]
    uv = np.array([[u, v] for _, _, u, v in obs], dtype=float)
    poses = [poses_fn(s, t) for s, t in cams]
    intr = [intrinsics_fn(s) for s, _ in cams]
    rays = [np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) for (u, v), k in zip(uv, intr)]
    _check_parallel(poses, rays)
    proj = np.stack([projection_matrix(p, k) for p, k in zip(poses, intr)])
    keep = np.arange(len(obs))
    while True:
        x = triangulate_dlt(proj[keep], uv[keep])
        err = reprojection_errors(proj[keep], uv[keep], x)
        worst = int(np.argmax(err))
        if err[worst] <= threshold:
            return x, err
        if keep.size <= 2:
            return None
        keep = np.delete(keep, worst)


def triangulate_tracks(tracks, rig, trajectory, threshold: float = OUTLIER_PX) -> TriangulationResult:
    """Mean reprojection error and mean track length of tracks triangulated with fixed poses.

    Poses are never refined. Per track the worst observation is dropped while
    its error exceeds ``threshold`` px; tracks that fall below two
    observations are discarded, and tracks whose rays are all parallel are
    skipped and counted as degenerate.
    """
    errs, lengths = [], []
    n_deg = n_disc = 0
    cache: dict = {}

    def pose_fn(s, t):
        key = (s, t)
        if key not in cache:
            cache[key] = sensor_pose(rig, trajectory, s, t)
        return cache[key]

    for tr in tracks:
        try:
            res = triangulate_track(tr, pose_fn, rig.intrinsics, threshold)
        except DegenerateGeometry:
            n_deg += 1
            continue
        if res is None:
            n_disc += 1
            continue
        errs.append(res[1])
        lengths.append(res[1].size)
    if not errs:
        return TriangulationResult(float("nan"), float("nan"), 0, n_deg, n_disc)
    return TriangulationResult(float(np.mean(np.concatenate(errs))), float(np.mean(lengths)), len(lengths), n_deg,
                               n_disc)
