"""Evaluation protocols that retrain a field with frozen candidate poses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyMesh, NoLidar
from ..field import extract_mesh, ray_box_bounds, render_rays, stratified_samples
from ..optimizer import TrainConfig, downscale_image, field_bounds, pixel_rays, train_field
from .consistency import P2M_THRESHOLD, geometric_consistency
from .metrics import MetricVector, nvs_metrics
from .triangulation import triangulate_tracks
from .truth import true_pose_errors

log = logging.getLogger(__name__)

RENDER_CHUNK = 8192
MESH_RESOLUTION = 128


@dataclass
class NVSResult:
    per_camera: dict  # camera -> (psnr, ssim)
    psnr: float
    ssim: float
    n_views: int


def render_view(fld, pose, intr, camera_index: int, n_samples: int, t_stop: float = 0.0) -> np.ndarray:
    """Render a full (H, W, 3) image with midpoint samples."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    d = pixel_rays(intr, u.ravel(), v.ravel()) @ pose.rotation_matrix.T
    o = np.broadcast_to(pose.translation, d.shape)
    out = np.empty((d.shape[0], 3))
    for s in range(0, d.shape[0], RENDER_CHUNK):
        oc, dc = np.ascontiguousarray(o[s : s + RENDER_CHUNK]), np.ascontiguousarray(d[s : s + RENDER_CHUNK])
        near, far, _ = ray_box_bounds(oc, dc, fld.lo, fld.hi)
        cams = np.full(oc.shape[0], camera_index, dtype=np.int64)
        tv = stratified_samples(near, far, n_samples, None)
        out[s : s + RENDER_CHUNK] = render_rays(fld, oc, dc, near, far, cams, n_samples, tvals=tv, t_stop=t_stop).color
    return out.reshape(intr.height, intr.width, 3)


def split_even_odd(dataset):
    """(train, test) frames: even-index frames of every sensor train, odd-index camera frames test."""
    train, test = [], []
    for sid in dataset.rig.ids:
        for k, f in enumerate(dataset.frames.get(sid, [])):
            if k % 2 == 0:
                train.append(f)
            elif f.kind == "camera":
                test.append(f)
    return train, test


def nvs_protocol(dataset, rig, trajectory, cfg: TrainConfig, index: int = 0, bounds=None) -> NVSResult:
    """Train on every other frame with frozen poses, render the held-out camera frames.

    Images are compared at the training resolution (``cfg.downscale``);
    masked pixels are excluded by copying the reference into the render.
    """
    train, test = split_even_odd(dataset)
    tr = train_field(dataset, rig, trajectory, cfg, frames=train, epochs=cfg.nvs_epochs, index=index, bounds=bounds)
    cams = rig.cameras
    per: dict[str, list] = {c: [] for c in cams}
    for f in test:
        intr = rig.intrinsics(f.sensor).downscaled(cfg.downscale)
        pose = trajectory.interpolate(f.timestamp) @ rig.extrinsic(f.sensor)
        ref, mask = downscale_image(f.image, f.mask, cfg.downscale)
        img = render_view(tr.field, pose, intr, cams.index(f.sensor), cfg.n_samples, cfg.t_stop)
        img[mask] = ref[mask]
        per[f.sensor].append(nvs_metrics(np.clip(img, 0.0, 1.0), np.clip(ref, 0.0, 1.0)))
    per_cam = {c: tuple(np.mean(v, axis=0).tolist()) for c, v in per.items() if v}
    if not per_cam:
        return NVSResult({}, float("nan"), float("nan"), 0)
    vals = np.array(list(per_cam.values()))
    return NVSResult(per_cam, float(vals[:, 0].mean()), float(vals[:, 1].mean()), len(test))


def consistency_mesh(dataset, rig, trajectory, cfg: TrainConfig, index: int = 0, bounds=None,
                     resolution: int = MESH_RESOLUTION):
    """Mesh of a field fitted to camera rays only, with frozen candidate poses."""
    tr = train_field(dataset, rig, trajectory, cfg, use_lidar=False, epochs=cfg.nvs_epochs, index=index, bounds=bounds)
    return extract_mesh(tr.field, resolution=resolution)


@dataclass
class SceneEvaluation:
    metrics: MetricVector
    nvs: NVSResult | None = None
    true_errors: object = None
    notes: list = field(default_factory=list)


def evaluate_scene(dataset, rig, trajectory, cfg: TrainConfig, gt=None, index: int = 0, bounds=None,
                   threshold: float = P2M_THRESHOLD, skip=()) -> SceneEvaluation:
    """All proxy metrics of one candidate pose set (plus true errors when ``gt`` is given).

    ``bounds`` fixes the field box so that pose sets of one scene are compared
    on the same grid; by default it comes from the dataset's own poses.
    ``skip`` may name "tracks", "nvs" or "geometry".
    """
    if bounds is None:
        bounds = field_bounds(dataset, dataset.rig, dataset.trajectory, cfg.field_margin)
    mv = MetricVector()
    ev = SceneEvaluation(mv)
    if "tracks" not in skip and dataset.tracks:
        tri = triangulate_tracks(dataset.tracks, rig, trajectory)
        mv.reproj_error, mv.track_length = tri.reproj_error, tri.track_length
        if tri.n_degenerate:
            ev.notes.append(f"{tri.n_degenerate} degenerate tracks skipped")
    if "nvs" not in skip and rig.cameras:
        ev.nvs = nvs_protocol(dataset, rig, trajectory, cfg, index=index, bounds=bounds)
        mv.psnr, mv.ssim = ev.nvs.psnr, ev.nvs.ssim
    if "geometry" not in skip and rig.cameras and dataset.lidar_frames():
        try:
            mesh = consistency_mesh(dataset, rig, trajectory, cfg, index=index, bounds=bounds)
            mv.p2m_precision, mv.p2m_mean = geometric_consistency(dataset, rig, trajectory, mesh, threshold)
        except (EmptyMesh, NoLidar) as exc:
            ev.notes.append(f"geometric consistency unavailable: {exc}")
    if gt is not None:
        ev.true_errors = true_pose_errors(rig, trajectory, gt)
    return ev
