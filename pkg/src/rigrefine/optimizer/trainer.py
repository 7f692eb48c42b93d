"""Two-stage joint optimization of scene fields and pose corrections.

Stage 1 (calibration) trains one field and one trajectory network per scene
and a single extrinsic correction shared by all scenes; each step the
per-scene extrinsic gradients are averaged before one shared update. Stage 2
(trajectory) freezes the extrinsic correction and refines each scene's
trajectory network and field.
"""

from __future__ import annotations

import hashlib
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..corrections import (
    CorrectionSet,
    TrajectoryCorrectionNet,
    aggregate_shared_gradients,
    chain_backward,
    decode_grad,
    decode_matrices,
)
from ..errors import NonFiniteLoss, RigMismatch
from ..field import (
    FieldGradients,
    VoxelField,
    coarse_to_fine_decay,
    ray_box_bounds,
    render_rays,
    render_rays_backward,
    stratified_samples,
)
from ..geometry import Trajectory
from ..rig import RigCalibration
from .config import TrainConfig
from .losses import AdamState, adam_step, loss
from .rays import downscale_image

log = logging.getLogger(__name__)


def _rng_key(*parts) -> int:
    words = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, dtype=np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


def lr_factor(step: int, total: int, final_fraction: float) -> float:
    """Cosine decay from 1 to ``final_fraction`` over ``total`` steps."""
    if total <= 1:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))
    return final_fraction + (1.0 - final_fraction) * c


@dataclass
class SceneBatch:
    """Sampled rays of one scene with targets; camera rays never come from masked pixels."""

    scene: str
    frame: np.ndarray  # (N,) frame index
    local_dirs: np.ndarray  # (N, 3) sensor-frame unit directions
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    cameras: np.ndarray  # appearance index, -1 for lidar
    is_camera: np.ndarray
    target_rgb: np.ndarray
    target_depth: np.ndarray  # NaN on camera rays and on lidar rays with unusable targets


@dataclass
class StepResult:
    loss: float
    photo: float
    depth: float
    g_ext: np.ndarray


@dataclass
class EpochLog:
    scene: str
    epoch: int
    photo: float
    depth: float
    ext_norm_m: float
    ext_norm_deg: float

    def line(self) -> str:
        return (f"{self.scene}\t{self.epoch}\t{self.photo:.6g}\t{self.depth:.6g}\t"
                f"{self.ext_norm_m:.6g}\t{self.ext_norm_deg:.6g}")


def field_bounds(dataset, rig: RigCalibration, traj: Trajectory, margin: float, fallback_radius: float = 10.0):
    """Box around the lidar cloud accumulated with the given poses (camera centers when there is no lidar)."""
    pts = []
    for f in dataset.lidar_frames():
        m = traj.matrices([f.timestamp])[0] @ rig.extrinsic(f.sensor).matrix()
        pts.append(np.asarray(f.points, dtype=float) @ m[:3, :3].T + m[:3, 3])
    if pts:
        allp = np.concatenate(pts)
        if allp.shape[0]:
            return allp.min(axis=0) - margin, allp.max(axis=0) + margin
    centers = traj.translations
    return centers.min(axis=0) - fallback_radius, centers.max(axis=0) + fallback_radius


class SceneTrainer:
    """Training state of one scene: field, trajectory network, ray tables and optimizer moments."""

    def __init__(self, dataset, rig: RigCalibration, traj: Trajectory, cfg: TrainConfig, index: int = 0,
                 name: str | None = None, frames=None, use_camera: bool = True, use_lidar: bool = True,
                 field_init: VoxelField | None = None, net_init: TrajectoryCorrectionNet | None = None,
                 bounds=None):
        self.name = name or dataset.name
        self.cfg = cfg
        self.rig = rig
        self.traj = traj
        self.sensors = rig.ids
        self.ref_index = self.sensors.index(rig.reference)
        self.camera_ids = rig.cameras
        self.key = _rng_key(cfg.seed, index, 0x5EED)
        frames = dataset.all_frames() if frames is None else list(frames)
        self.frames = frames
        self.times = np.array([f.timestamp for f in frames], dtype=float)
        self.frame_sensor = np.array([self.sensors.index(f.sensor) for f in frames], dtype=np.int64)
        self.ref_mats = traj.matrices(self.times) if frames else np.zeros((0, 4, 4))
        self.extr_mats = np.stack([rig.extrinsic(s).matrix() for s in self.sensors])[self.frame_sensor] \
            if frames else np.zeros((0, 4, 4))
        self._build_tables(use_camera, use_lidar)
        if field_init is not None:
            self.field = field_init.copy()
        else:
            lo, hi = bounds if bounds is not None else field_bounds(dataset, rig, traj, cfg.field_margin)
            self.field = VoxelField.for_box(lo, hi, cfg.finest_resolution, cfg.n_levels,
                                            n_cameras=len(self.camera_ids), density_scale=cfg.density_scale)
        if net_init is not None:
            self.net = TrajectoryCorrectionNet(net_init.t_min, net_init.t_max, net_init.n_freqs, net_init.hidden)
            self.net.params[...] = net_init.params
        else:
            self.net = TrajectoryCorrectionNet(traj.t_min, traj.t_max, seed=_rng_key(cfg.seed, index, 0x7A) % (2**32))
        self.opt_grid = AdamState.like(self.field.grid)
        self.opt_app = AdamState.like(self.field.appearance)
        self.opt_bg = AdamState.like(self.field.background_logit)
        self.opt_net = AdamState.like(self.net.params)
        self._grads = FieldGradients.zeros_like(self.field)

    # -- ray tables -------------------------------------------------------------

    def _build_tables(self, use_camera: bool, use_lidar: bool) -> None:
        ds = self.cfg.downscale
        cam_frame, cam_pix, cam_rgb = [], [], []
        n = len(self.frames)
        self.f_intr = np.zeros((n, 4))  # fx, fy, cx, cy of the downscaled camera
        self.f_cam = np.full(n, -1, dtype=np.int64)
        lid_frame, lid_dir, lid_rng = [], [], []
        for i, f in enumerate(self.frames):
            if f.kind == "camera":
                if not use_camera:
                    continue
                intr = self.rig.intrinsics(f.sensor).downscaled(ds)
                self.f_intr[i] = (intr.fx, intr.fy, intr.cx, intr.cy)
                self.f_cam[i] = self.camera_ids.index(f.sensor)
                img, mask = downscale_image(f.image, f.mask, ds)
                v, u = np.nonzero(~mask)
                cam_frame.append(np.full(u.size, i, dtype=np.int64))
                cam_pix.append(np.stack([u, v], axis=1))
                cam_rgb.append(img[v, u])
            elif use_lidar and f.points.shape[0]:
                p = np.asarray(f.points, dtype=float)
                r = np.linalg.norm(p, axis=1)
                lid_frame.append(np.full(r.size, i, dtype=np.int64))
                lid_dir.append(p / r[:, None])
                lid_rng.append(r)
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)  # noqa: E731
        self.cam_frame = cat(cam_frame, (0,)).astype(np.int64)
        self.cam_pix = cat(cam_pix, (0, 2)).astype(float)
        self.cam_rgb = cat(cam_rgb, (0, 3)).astype(float)
        self.lid_frame = cat(lid_frame, (0,)).astype(np.int64)
        self.lid_dir = cat(lid_dir, (0, 3)).astype(float)
        self.lid_rng = cat(lid_rng, (0,)).astype(float)

    @property
    def n_camera_rays(self) -> int:
        return self.cam_frame.size

    @property
    def n_lidar_rays(self) -> int:
        return self.lid_frame.size

    # -- poses ------------------------------------------------------------------------

    def frame_matrices(self, ext: np.ndarray):
        """World poses of all frames plus the pieces needed for pose gradients."""
        v_traj, acts = self.net.forward(self.times)
        d_traj = decode_matrices(v_traj)
        v_ext = np.asarray(ext, dtype=float)[self.frame_sensor].copy()
        v_ext[self.frame_sensor == self.ref_index] = 0.0
        d_ext = decode_matrices(v_ext)
        mats = self.ref_mats @ d_traj @ self.extr_mats @ d_ext
        return mats, (v_traj, acts, d_traj, v_ext, d_ext)

    # -- batches ----------------------------------------------------------------------

    def sample_batch(self, ext: np.ndarray, step: int, n_rays: int | None = None, mats=None) -> tuple[SceneBatch, np.random.Generator]:
        cfg = self.cfg
        n_rays = n_rays or cfg.rays_per_batch
        rng = np.random.Generator(np.random.Philox(key=self.key, counter=step))
        if mats is None:
            mats, _ = self.frame_matrices(ext)
        if self.n_camera_rays and self.n_lidar_rays:
            n_cam = int(round(n_rays * cfg.camera_fraction))
        else:
            n_cam = n_rays if self.n_camera_rays else 0
        n_lid = n_rays - n_cam
        ci = rng.integers(0, self.n_camera_rays, n_cam) if n_cam else np.zeros(0, dtype=np.int64)
        li = rng.integers(0, self.n_lidar_rays, n_lid) if n_lid else np.zeros(0, dtype=np.int64)
        f_c = self.cam_frame[ci]
        pix = self.cam_pix[ci]
        k = self.f_intr[f_c]
        dc = np.stack([(pix[:, 0] - k[:, 2]) / k[:, 0], (pix[:, 1] - k[:, 3]) / k[:, 1], np.ones(n_cam)], axis=1)
        dc /= np.linalg.norm(dc, axis=1, keepdims=True)
        frame = np.concatenate([f_c, self.lid_frame[li]])
        local = np.concatenate([dc, self.lid_dir[li]])
        m = mats[frame]
        origins = np.ascontiguousarray(m[:, :3, 3])
        dirs = np.einsum("nij,nj->ni", m[:, :3, :3], local)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        near, far, _ = ray_box_bounds(origins, dirs, self.field.lo, self.field.hi)
        is_cam = np.zeros(frame.size, dtype=bool)
        is_cam[:n_cam] = True
        target_rgb = np.zeros((frame.size, 3))
        target_rgb[:n_cam] = self.cam_rgb[ci]
        target_depth = np.full(frame.size, np.nan)
        r = self.lid_rng[li]
        usable = (r > near[n_cam:]) & (r < far[n_cam:])
        target_depth[n_cam:] = np.where(usable, r, np.nan)
        cams = np.where(is_cam, self.f_cam[frame], -1)
        batch = SceneBatch(self.name, frame, local, origins, np.ascontiguousarray(dirs), near, far, cams, is_cam,
                           target_rgb, target_depth)
        return batch, rng

    # -- one optimization step ---------------------------------------------------------

    def step(self, ext: np.ndarray, step: int, epoch: int, lr_scale: float, train_traj: bool,
             want_ext_grad: bool, train_field: bool = True) -> StepResult:
        cfg = self.cfg
        mats, (v_traj, acts, d_traj, v_ext, d_ext) = self.frame_matrices(ext)
        batch, rng = self.sample_batch(ext, step, mats=mats)
        n = batch.frame.size
        jitter = rng.random((n, cfg.n_samples))
        tvals = stratified_samples(batch.near, batch.far, cfg.n_samples, jitter)
        out = render_rays(self.field, batch.origins, batch.directions, batch.near, batch.far, batch.cameras,
                          cfg.n_samples, tvals=tvals, t_stop=cfg.t_stop)
        valid_depth = out.valid & np.isfinite(batch.target_depth)
        terms = loss(batch.is_camera, batch.target_rgb, np.nan_to_num(batch.target_depth), out.color,
                     np.nan_to_num(out.depth), valid_depth, cfg.photo_weight, cfg.depth_weight)
        if not np.isfinite(terms.total):
            raise NonFiniteLoss(f"scene {self.name}: non-finite loss at step {step}")
        need_pose = want_ext_grad or train_traj
        g = self._grads
        g.grid.fill(0.0)
        g.appearance.fill(0.0)
        g.background.fill(0.0)
        render_rays_backward(self.field, batch.origins, batch.directions, batch.far, batch.cameras, out,
                             g_color=terms.g_color, g_depth=terms.g_depth, out=g, geometry=need_pose)
        g_ext = np.zeros((len(self.sensors), 6))
        if need_pose:
            g_ext, g_net = self._pose_grads(batch, g, mats, v_traj, acts, d_traj, v_ext, d_ext)
            if not want_ext_grad:
                g_ext = np.zeros_like(g_ext)  # frozen block: stop the gradient here
            if train_traj:
                adam_step(self.net.params, g_net, self.opt_net, cfg.lr_trajectory * lr_scale)
        if train_field:
            lam = coarse_to_fine_decay(epoch, self.field.n_levels, cfg.lambda_max, epochs=cfg.epochs)
            for lvl in range(self.field.n_levels):
                if lam[lvl] > 0:
                    sl = self.field.level_slice(lvl)
                    g.grid[sl] += 2.0 * lam[lvl] * self.field.grid[sl]
            lr = cfg.lr_field * lr_scale
            adam_step(self.field.grid, g.grid, self.opt_grid, lr)
            if self.field.appearance.size:
                adam_step(self.field.appearance, g.appearance, self.opt_app, lr)
            adam_step(self.field.background_logit, g.background, self.opt_bg, lr)
        return StepResult(terms.total, terms.photo, terms.depth, g_ext)

    def _pose_grads(self, batch, g, mats, v_traj, acts, d_traj, v_ext, d_ext):
        n_frames = len(self.frames)
        # dL/d[R|t] of every frame pose from the per-ray origin/direction gradients
        outer = g.direction[:, :, None] * batch.local_dirs[:, None, :]
        gp = np.zeros((n_frames, 3, 4))
        for i in range(3):
            for j in range(3):
                gp[:, i, j] = np.bincount(batch.frame, outer[:, i, j], minlength=n_frames)
            gp[:, i, 3] = np.bincount(batch.frame, g.origin[:, i], minlength=n_frames)
        g_traj4, g_ext4 = chain_backward(self.ref_mats, d_traj, self.extr_mats, d_ext, gp)
        g_vext = decode_grad(v_ext, g_ext4)
        g_ext = np.zeros((len(self.sensors), 6))
        for c in range(6):
            g_ext[:, c] = np.bincount(self.frame_sensor, g_vext[:, c], minlength=len(self.sensors))
        g_ext[self.ref_index] = 0.0
        g_net = self.net.backward(acts, decode_grad(v_traj, g_traj4))
        return g_ext, g_net

    def evaluate_loss(self, ext: np.ndarray, step: int, n_rays: int | None = None, jitter: bool = False) -> float:
        """Loss on the batch drawn for ``step`` without updating anything."""
        cfg = self.cfg
        batch, rng = self.sample_batch(ext, step, n_rays)
        jit = rng.random((batch.frame.size, cfg.n_samples)) if jitter else None
        tvals = stratified_samples(batch.near, batch.far, cfg.n_samples, jit)
        out = render_rays(self.field, batch.origins, batch.directions, batch.near, batch.far, batch.cameras,
                          cfg.n_samples, tvals=tvals, t_stop=cfg.t_stop)
        valid = out.valid & np.isfinite(batch.target_depth)
        return loss(batch.is_camera, batch.target_rgb, np.nan_to_num(batch.target_depth), out.color,
                    np.nan_to_num(out.depth), valid, cfg.photo_weight, cfg.depth_weight).total


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def ext_norms(ext: np.ndarray) -> tuple[float, float]:
    """Largest translation (m) and rotation (deg) among extrinsic correction vectors."""
    if ext.size == 0:
        return 0.0, 0.0
    return float(np.max(np.linalg.norm(ext[:, :3], axis=1))), float(np.degrees(np.max(np.linalg.norm(ext[:, 3:], axis=1))))


def _emit(logs: list, rec: EpochLog, progress) -> None:
    logs.append(rec)
    if progress is not None:
        print(rec.line(), file=progress, flush=True)


@dataclass
class StageResult:
    corrections: CorrectionSet
    fields: dict = field(default_factory=dict)
    trainers: dict = field(default_factory=dict)
    logs: list = field(default_factory=list)
    seconds: float = 0.0
    ext_grad_norm: float = 0.0

    def summary(self) -> dict:
        return {
            "seconds": self.seconds,
            "epochs": [r.__dict__ for r in self.logs],
            "extrinsic": {s: self.corrections.extrinsic[s].vector.tolist() for s in self.corrections.sensors},
        }


def _check_rigs(scenes, calib: RigCalibration) -> None:
    for ds in scenes:
        if not ds.rig.same_layout(calib):
            raise RigMismatch(f"scene {ds.name!r} does not share the rig layout")


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))


def run_calibration_stage(scenes, calib: RigCalibration, cfg: TrainConfig, trajectories=None,
                          progress=sys.stderr) -> StageResult:
    """Stage 1: shared extrinsic correction, private field and trajectory network per scene.

    ``trajectories`` (optional, per scene) replaces each dataset's trajectory
    as the initial reference trajectory.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("at least one scene is required")
    _check_rigs(scenes, calib)
    order = sorted(range(len(scenes)), key=lambda i: scenes[i].name)
    trajs = trajectories or [ds.trajectory for ds in scenes]
    trainers = [SceneTrainer(scenes[i], calib, trajs[i], cfg, index=k, name=scenes[i].name)
                for k, i in enumerate(order)]
    ext = np.zeros((len(calib.ids), 6))
    opt_ext = AdamState.like(ext)
    logs: list[EpochLog] = []
    t_start = time.perf_counter()
    total = cfg.total_steps
    for epoch in range(cfg.epochs):
        acc = np.zeros((len(trainers), 2))
        pose_on = epoch >= cfg.warmup_epochs
        for s in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + s
            scale = lr_factor(step, total, cfg.lr_final_fraction)
            results = _map(lambda tr: tr.step(ext, step, epoch, scale, train_traj=pose_on, want_ext_grad=pose_on),
                           trainers, cfg.threads)
            for k, r in enumerate(results):
                acc[k] += (r.photo, r.depth)
            if pose_on:
                g = aggregate_shared_gradients([r.g_ext for r in results])
                adam_step(ext, g, opt_ext, cfg.lr_extrinsic * scale)
                ext[trainers[0].ref_index] = 0.0
        m, d = ext_norms(ext)
        for k, tr in enumerate(trainers):
            ph, dp = acc[k] / cfg.steps_per_epoch
            _emit(logs, EpochLog(tr.name, epoch, float(ph), float(dp), m, d), progress)
    corr = CorrectionSet(calib.ids, calib.reference, {tr.name: tr.net for tr in trainers})
    for i, s in enumerate(calib.ids):
        corr.set_extrinsic_vector(s, ext[i])
    return StageResult(corr, {tr.name: tr.field for tr in trainers}, {tr.name: tr for tr in trainers}, logs,
                       time.perf_counter() - t_start)


def _checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def run_trajectory_stage(scene, calib: RigCalibration, frozen_ext, cfg: TrainConfig, trajectory=None, index: int = 0,
                         field_init=None, net_init=None, progress=sys.stderr) -> StageResult:
    """Stage 2: refine one scene's trajectory network and field; the extrinsic correction stays fixed.

    ``frozen_ext`` is a :class:`CorrectionSet` or an (n_sensors, 6) array.
    """
    _check_rigs([scene], calib)
    if isinstance(frozen_ext, CorrectionSet):
        ext = np.stack([frozen_ext.extrinsic[s].vector if s in frozen_ext.extrinsic else np.zeros(6)
                        for s in calib.ids])
    else:
        ext = np.array(frozen_ext, dtype=float).reshape(len(calib.ids), 6)
    ext.flags.writeable = False
    before = _checksum(ext)
    traj = trajectory or scene.trajectory
    tr = SceneTrainer(scene, calib, traj, cfg, index=index, name=scene.name, field_init=field_init, net_init=net_init)
    logs: list[EpochLog] = []
    t_start = time.perf_counter()
    total = cfg.total_steps
    ext_grad_sq = 0.0
    m, d = ext_norms(ext)
    for epoch in range(cfg.epochs):
        acc = np.zeros(2)
        pose_on = epoch >= cfg.warmup_epochs or net_init is not None
        for s in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + s
            r = tr.step(ext, step, epoch, lr_factor(step, total, cfg.lr_final_fraction), train_traj=pose_on,
                        want_ext_grad=False)
            acc += (r.photo, r.depth)
            ext_grad_sq += float(np.sum(r.g_ext**2))
            if _checksum(ext) != before:
                raise AssertionError("extrinsic correction changed during the trajectory stage")
        _emit(logs, EpochLog(tr.name, epoch, float(acc[0] / cfg.steps_per_epoch), float(acc[1] / cfg.steps_per_epoch),
                             m, d), progress)
    corr = CorrectionSet(calib.ids, calib.reference, {tr.name: tr.net})
    for i, s in enumerate(calib.ids):
        corr.set_extrinsic_vector(s, ext[i])
    res = StageResult(corr, {tr.name: tr.field}, {tr.name: tr}, logs, time.perf_counter() - t_start)
    res.ext_grad_norm = math.sqrt(ext_grad_sq)
    return res


def train_field(scene, rig: RigCalibration, traj: Trajectory, cfg: TrainConfig, frames=None, use_camera: bool = True,
                use_lidar: bool = True, epochs: int | None = None, index: int = 0, bounds=None) -> SceneTrainer:
    """Fit a field with all poses frozen (evaluation retrains)."""
    cfg = cfg.replace(epochs=epochs or cfg.epochs)
    tr = SceneTrainer(scene, rig, traj, cfg, index=index, frames=frames, use_camera=use_camera, use_lidar=use_lidar,
                      bounds=bounds)
    ext = np.zeros((len(rig.ids), 6))
    total = cfg.total_steps
    for epoch in range(cfg.epochs):
        for s in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + s
            tr.step(ext, step, epoch, lr_factor(step, total, cfg.lr_final_fraction), train_traj=False,
                    want_ext_grad=False)
    return tr
