"""Training loss and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._native import kernels
from ..errors import ShapeMismatch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LossTerms:
    total: float
    photo: float
    depth: float
    g_color: np.ndarray  # (N, 3), zero on lidar rays
    g_depth: np.ndarray  # (N,), zero on camera rays and invalid depths


def loss(is_camera, target_rgb, target_depth, color, depth, valid, photo_weight: float = 1.0,
         depth_weight: float = 1.0) -> LossTerms:
    """``w_photo * mean_cam(mean_ch (c - c*)^2) + w_depth * mean_valid_lidar |d - d*|`` and its gradient.

    ``target_rgb`` rows of lidar rays and ``target_depth`` entries of camera
    rays are ignored. Lidar rays whose rendered depth is invalid do not count.
    """
    is_camera = np.asarray(is_camera, dtype=bool)
    n = is_camera.size
    g_color = np.zeros((n, 3))
    g_depth = np.zeros(n)
    photo = 0.0
    n_cam = int(is_camera.sum())
    if n_cam:
        diff = np.asarray(color)[is_camera] - np.asarray(target_rgb)[is_camera]
        photo = float(np.mean(np.mean(diff * diff, axis=1)))
        g_color[is_camera] = photo_weight * 2.0 * diff / (3.0 * n_cam)
    depth_term = 0.0
    lid = ~is_camera & np.asarray(valid, dtype=bool)
    n_lid = int(lid.sum())
    if n_lid:
        dd = np.asarray(depth)[lid] - np.asarray(target_depth)[lid]
        depth_term = float(np.mean(np.abs(dd)))
        g_depth[lid] = depth_weight * np.sign(dd) / n_lid
    total = photo_weight * photo + depth_weight * depth_term
    return LossTerms(total, photo, depth_term, g_color, g_depth)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; returns the advanced state."""
    if params.shape != grads.shape or params.shape != state.m.shape or params.shape != state.v.shape:
        raise ShapeMismatch(f"params {params.shape}, grads {grads.shape}, moments {state.m.shape}/{state.v.shape}")
    if not (params.flags.c_contiguous and params.dtype == np.float64):
        raise ShapeMismatch("params must be a contiguous float64 array")
    state.step += 1
    p = params.reshape(-1)
    kernels.adam_update(p, np.ascontiguousarray(grads, dtype=float).reshape(-1), state.m.reshape(-1),
                        state.v.reshape(-1), float(lr), beta1, beta2, eps, state.step)
    return state
