"""Rays and targets from sensor frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import MissingIntrinsics
from ..geometry import Pose
from ..rig import CameraIntrinsics


@dataclass
class RayBundle:
    """World-frame rays of one frame with their targets.

    Camera bundles carry ``colors`` (N, 3) and ``pixels`` (N, 2) as (u, v) of
    the downscaled image; lidar bundles carry ``depths`` (N,).
    """

    kind: str
    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray | None = None
    depths: np.ndarray | None = None
    pixels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]


def downscale_image(image: np.ndarray, mask: np.ndarray | None, factor: int):
    """Block-average ``factor`` x ``factor`` tiles; a tile is masked if any pixel in it is."""
    if factor == 1:
        m = np.zeros(image.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return np.asarray(image, dtype=float), m
    h, w = image.shape[0] // factor, image.shape[1] // factor
    img = np.asarray(image[: h * factor, : w * factor], dtype=float)
    img = img.reshape(h, factor, w, factor, 3).mean(axis=(1, 3))
    if mask is None:
        m = np.zeros((h, w), dtype=bool)
    else:
        m = np.asarray(mask[: h * factor, : w * factor], dtype=bool).reshape(h, factor, w, factor).any(axis=(1, 3))
    return img, m


def pixel_rays(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit camera-frame directions through pixel centers (u, v)."""
    d = np.stack([(np.asarray(u, dtype=float) - intr.cx) / intr.fx,
                  (np.asarray(v, dtype=float) - intr.cy) / intr.fy,
                  np.ones(np.shape(u))], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def build_rays(frame, pose: Pose, intrinsics: CameraIntrinsics | None = None, downscale: int = 1) -> RayBundle:
    """One ray per unmasked pixel of the downscaled image, or one per lidar point."""
    r = pose.rotation_matrix
    if frame.kind == "camera":
        if intrinsics is None:
            raise MissingIntrinsics(f"camera frame of {frame.sensor!r} needs intrinsics")
        intr = intrinsics.downscaled(downscale)
        img, mask = downscale_image(frame.image, frame.mask, downscale)
        v, u = np.nonzero(~mask)
        d = pixel_rays(intr, u, v) @ r.T
        o = np.broadcast_to(pose.translation, d.shape).copy()
        return RayBundle("camera", o, d, colors=img[v, u], pixels=np.stack([u, v], axis=1))
    pts = np.asarray(frame.points, dtype=float)
    rng = np.linalg.norm(pts, axis=1)
    d = (pts / rng[:, None]) @ r.T
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return RayBundle("lidar", o, d, depths=rng)
