"""Noise injection, subsequence splitting and dynamic-object masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import NotGroundTruth
from ..geometry import Pose, sensor_pose
from ..rig import RigCalibration
from .types import GroundTruthRecord, KeypointTrack, NoiseSpec, SceneDataset

MASK_MARGIN = 1.1

# SOAC-level stress noise: 0.5 m and 5 degrees on every non-reference sensor
PRESETS = {
    "soac-noise": NoiseSpec(ext_translation_m=0.5, ext_rotation_deg=5.0, ext_mode="sphere"),
    "mild": NoiseSpec(ext_translation_m=0.10, ext_rotation_deg=2.0, ext_mode="uniform"),
    "trajectory": NoiseSpec(traj_amplitude_m=0.2, traj_amplitude_deg=1.0, traj_frequency=0.05),
}


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_extrinsic_noise(rig: RigCalibration, noise: NoiseSpec, rng: np.random.Generator) -> dict[str, Pose]:
    """One noise pose per sensor (identity for the reference), in rig order."""
    out = {}
    b_t = noise.ext_translation_m
    b_r = math.radians(noise.ext_rotation_deg)
    for sid in rig.ids:
        if sid == rig.reference:
            out[sid] = Pose.identity()
            continue
        if noise.ext_mode == "sphere":
            t = _unit(rng) * b_t
            w = _unit(rng) * b_r
        else:
            t = rng.uniform(-b_t, b_t, 3)
            w = rng.uniform(-b_r, b_r, 3)
        out[sid] = Pose.from_axis_angle(w, t) if (b_t or b_r) else Pose.identity()
    return out


def sample_trajectory_noise(dataset: SceneDataset, noise: NoiseSpec, rng: np.random.Generator) -> list[Pose]:
    """Smooth sinusoid of arc length per axis plus per-knot translation jitter."""
    traj = dataset.trajectory
    n = len(traj)
    if not (noise.traj_amplitude_m or noise.traj_amplitude_deg or noise.traj_jitter_m):
        return [Pose.identity()] * n
    s = traj.arc_length()
    ph_t = rng.uniform(0.0, 2.0 * np.pi, 3)
    ph_r = rng.uniform(0.0, 2.0 * np.pi, 3)
    arg = 2.0 * np.pi * noise.traj_frequency * s[:, None]
    dt = noise.traj_amplitude_m * np.sin(arg + ph_t)
    dr = math.radians(noise.traj_amplitude_deg) * np.sin(arg + ph_r)
    if noise.traj_jitter_m:
        dt = dt + rng.normal(0.0, noise.traj_jitter_m, dt.shape)
    return [Pose.from_axis_angle(dr[k], dt[k]) for k in range(n)]


def perturb(dataset: SceneDataset, noise: NoiseSpec, ext_noise: dict[str, Pose] | None = None,
            rng: np.random.Generator | None = None) -> tuple[SceneDataset, GroundTruthRecord]:
    """Right-compose noise onto every non-reference extrinsic and every trajectory knot.

    Pass ``ext_noise`` to reuse one extrinsic draw across several scenes of a rig.
    """
    if dataset.provenance != "synthetic-gt":
        raise NotGroundTruth(f"dataset {dataset.name!r} has provenance {dataset.provenance!r}")
    rng = rng or np.random.default_rng(noise.seed)
    if ext_noise is None:
        ext_noise = sample_extrinsic_noise(dataset.rig, noise, rng)
    traj_noise = sample_trajectory_noise(dataset, noise, rng)
    rig = dataset.rig
    new_ext = {s: rig.extrinsic(s) @ ext_noise[s] for s in rig.ids if s != rig.reference}
    # composing with an identity noise pose is bit-exact, so zero noise leaves poses unchanged
    new_rig = rig.with_extrinsics(new_ext)
    new_traj = dataset.trajectory.map_poses(lambda k, p: p @ traj_noise[k])
    record = GroundTruthRecord(rig, dataset.trajectory, dict(ext_noise), list(traj_noise))
    return dataset.with_poses(new_rig, new_traj, "perturbed"), record


def perturb_collection(datasets: list[SceneDataset], noise: NoiseSpec) -> list[tuple[SceneDataset, GroundTruthRecord]]:
    """Perturb scenes of one rig: a shared extrinsic draw, independent trajectory noise per scene."""
    if not datasets:
        return []
    rng = np.random.default_rng(noise.seed)
    ext_noise = sample_extrinsic_noise(datasets[0].rig, noise, rng)
    out = []
    for i, ds in enumerate(datasets):
        scene_rng = np.random.default_rng([noise.seed, i + 1])
        out.append(perturb(ds, noise, ext_noise=ext_noise, rng=scene_rng))
    return out


# --------------------------------------------------------------------------
# subsequences
# --------------------------------------------------------------------------


def split_subsequences(dataset: SceneDataset, length_m: float) -> list[SceneDataset]:
    """Cut at multiples of ``length_m`` of reference arc length; a short remainder is kept.

    Adjacent pieces share their boundary knot; every frame lands in exactly
    one piece (the one whose half-open time window holds it; the last piece
    also holds the final instant).
    """
    if not length_m > 0:
        raise ValueError("length_m must be positive")
    traj = dataset.trajectory
    s = traj.arc_length()
    n_pieces = max(1, int(math.ceil(s[-1] / length_m - 1e-9)))
    cuts = [0]
    for j in range(1, n_pieces):
        k = int(np.searchsorted(s, j * length_m, side="left"))
        k = min(k, len(traj) - 1)
        if k > cuts[-1]:
            cuts.append(k)
    if cuts[-1] != len(traj) - 1:
        cuts.append(len(traj) - 1)
    pieces = []
    for j in range(len(cuts) - 1):
        k0, k1 = cuts[j], cuts[j + 1]
        t0, t1 = float(traj.times[k0]), float(traj.times[k1])
        last = j == len(cuts) - 2
        sub_traj = traj.slice(t0, t1)

        def inside(t, t0=t0, t1=t1, last=last):
            return t0 <= t < t1 or (last and t == t1)

        frames = {sid: [f for f in lst if inside(f.timestamp)] for sid, lst in dataset.frames.items()}
        tracks = []
        for tr in dataset.tracks:
            obs = tuple(o for o in tr.observations if inside(o[1]))
            if len(obs) >= 2:
                tracks.append(KeypointTrack(tr.track_id, obs))
        name = f"{dataset.name}_{j:02d}"
        pieces.append(replace(dataset, trajectory=sub_traj, frames=frames, name=name, tracks=tracks))
    return pieces


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Box3D:
    """Oriented box in the world frame; ``rotation`` maps box axes to world."""

    center: tuple
    half_extents: tuple
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def arrays(self, margin: float = 1.0):
        return (np.asarray(self.center, dtype=float), np.asarray(self.half_extents, dtype=float) * margin,
                np.asarray(self.rotation, dtype=float))

    def contains(self, points, margin: float = 1.0) -> np.ndarray:
        c, h, r = self.arrays(margin)
        local = (np.asarray(points, dtype=float).reshape(-1, 3) - c) @ r
        return np.all(np.abs(local) <= h, axis=1)

    def ray_hits(self, origins, dirs, margin: float = 1.0) -> np.ndarray:
        """True where the ray meets the (scaled) box at positive depth, or starts inside it."""
        c, h, r = self.arrays(margin)
        o = (np.asarray(origins, dtype=float).reshape(-1, 3) - c) @ r
        d = np.asarray(dirs, dtype=float).reshape(-1, 3) @ r
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-h - o) / d
            t1 = (h - o) / d
        lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        # axis-parallel rays outside the slab never enter
        parallel_out = (d == 0) & (np.abs(o) > h)
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        return (t_near <= t_far) & (t_far > 0) & ~parallel_out.any(axis=1)


def _boxes_at(boxes: dict, t: float, tol: float = 1e-6) -> list:
    if t in boxes:
        return boxes[t]
    for k, v in boxes.items():
        if abs(k - t) <= tol:
            return v
    return []


def apply_masks(dataset: SceneDataset, boxes: dict, margin: float = MASK_MARGIN) -> SceneDataset:
    """Mask pixels whose rays meet an enlarged box and drop lidar points inside one.

    ``boxes`` maps a timestamp to the list of :class:`Box3D` present then.
    Existing masks are kept (union).
    """
    rig, traj = dataset.rig, dataset.trajectory
    frames = {}
    for sid, lst in dataset.frames.items():
        out = []
        for f in lst:
            here = _boxes_at(boxes, f.timestamp)
            if f.kind == "camera":
                h, w = f.image.shape[:2]
                mask = np.zeros((h, w), dtype=bool) if f.mask is None else f.mask.copy()
                if here:
                    pose = sensor_pose(rig, traj, sid, f.timestamp)
                    d = rig.intrinsics(sid).pixel_directions().reshape(-1, 3) @ pose.rotation_matrix.T
                    for b in here:
                        mask |= b.ray_hits(pose.translation[None], d, margin).reshape(h, w)
                out.append(replace(f, mask=mask))
            else:
                pts = f.points
                keep = np.ones(pts.shape[0], dtype=bool)
                if here:
                    world = sensor_pose(rig, traj, sid, f.timestamp).apply(pts.astype(float))
                    for b in here:
                        keep &= ~b.contains(world, margin)
                gt = None if f.gt_ranges is None else f.gt_ranges[keep]
                out.append(replace(f, points=pts[keep], gt_ranges=gt))
        frames[sid] = out
    return replace(dataset, frames=frames)
