"""Emission-absorption volume rendering over a :class:`VoxelField`, with exact gradients.

For stratified samples ``t_i`` along a ray::

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    color   = sum_i T_i alpha_i c_i + T_end * background
    depth   = sum_i T_i alpha_i t_i / opacity      (valid when opacity >= EPS_OPACITY)

``delta_i = t_{i+1} - t_i`` and the last interval runs to ``far``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .._native import kernels
from ..errors import MismatchedForward
from .voxel import VoxelField

EPS_OPACITY = 0.05
DEFAULT_SAMPLES = 96
LAMBDA_MAX = 1e-2


@dataclass(frozen=True)
class SampleStream:
    """Counter-based random stream for stratified jitter.

    A stream is identified by ``(seed, counter)``; the same pair always yields
    the same jitter regardless of thread scheduling.
    """

    seed: int
    counter: int = 0

    def jitter(self, n_rays: int, n_samples: int) -> np.ndarray:
        bits = np.random.Philox(key=int(self.seed) & (2**64 - 1), counter=int(self.counter))
        return np.random.Generator(bits).random((n_rays, n_samples))

    def key(self) -> tuple[int, int]:
        return (int(self.seed), int(self.counter))

    def advance(self, n: int = 1) -> "SampleStream":
        return SampleStream(self.seed, self.counter + n)


def stratified_samples(near, far, n_samples: int, jitter: np.ndarray | None) -> np.ndarray:
    """(N, S) sample depths, one uniformly jittered sample per equal-width bin."""
    near = np.asarray(near, dtype=float).reshape(-1, 1)
    far = np.asarray(far, dtype=float).reshape(-1, 1)
    u = 0.5 if jitter is None else jitter
    bins = (np.arange(n_samples, dtype=float) + u) / n_samples
    return np.ascontiguousarray(near + bins * (far - near))


def ray_box_bounds(origins, dirs, lo, hi, near_min: float = 0.05):
    """(near, far, hit) of rays against the box; ``hit`` false when the ray misses."""
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(np.max(tmin, axis=1), near_min)
    far = np.min(tmax, axis=1)
    hit = far > near + 1e-6
    return near, np.where(hit, far, near + 1e-3), hit


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    kind: str = "camera"
    camera: int = -1
    pixel: tuple[int, int] | None = None
    beam: int | None = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "direction", d)


@dataclass
class RenderResult:
    color: np.ndarray
    expected_depth: float
    opacity: float
    depth_valid: bool
    residual_transmittance: float
    stream_key: tuple[int, int] | None = None


@dataclass
class RenderBatch:
    """Batched render output plus what the backward pass needs."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    valid: np.ndarray
    residual: np.ndarray
    wdepth: np.ndarray
    tvals: np.ndarray
    stream_key: tuple[int, int] | None = None
    t_stop: float = 0.0


@dataclass
class FieldGradients:
    grid: np.ndarray
    appearance: np.ndarray
    background: np.ndarray
    origin: np.ndarray | None = None
    direction: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, fld: VoxelField) -> "FieldGradients":
        return cls(np.zeros_like(fld.grid), np.zeros_like(fld.appearance), np.zeros(3))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"grid": self.grid, "appearance": self.appearance, "background": self.background}


def _prep(origins, dirs, cameras, n):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=float).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
    if cameras is None:
        cameras = np.full(origins.shape[0], -1, dtype=np.int64)
    return origins, dirs, np.asarray(cameras, dtype=np.int64).reshape(-1)


def render_rays(fld: VoxelField, origins, dirs, near, far, cameras=None, n_samples: int = DEFAULT_SAMPLES,
                stream: SampleStream | None = None, tvals: np.ndarray | None = None, t_stop: float = 0.0) -> RenderBatch:
    """Render a batch of rays. Either a sample ``stream`` or explicit ``tvals`` fix the samples.

    ``t_stop > 0`` enables early ray termination: samples reached with
    transmittance below it are skipped (and excluded from the backward pass).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    origins, dirs, cameras = _prep(origins, dirs, cameras, None)
    far = np.ascontiguousarray(np.asarray(far, dtype=float).reshape(-1))
    if tvals is None:
        jit = None if stream is None else stream.jitter(origins.shape[0], n_samples)
        tvals = stratified_samples(near, far, n_samples, jit)
    app = np.ascontiguousarray(fld.appearance_offsets(cameras))
    bg = np.ascontiguousarray(fld.background)
    color, opacity, wdepth, t_end = kernels.render_forward(*fld.kernel_args(), origins, dirs, tvals, far, app, bg, t_stop)
    valid = opacity >= EPS_OPACITY
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(valid, wdepth / np.where(valid, opacity, 1.0), np.nan)
    return RenderBatch(color, depth, opacity, valid, t_end, wdepth, tvals, None if stream is None else stream.key(), t_stop)


def render_rays_backward(fld: VoxelField, origins, dirs, far, cameras, batch: RenderBatch,
                         g_color=None, g_depth=None, g_opacity=None, out: FieldGradients | None = None,
                         geometry: bool = True) -> FieldGradients:
    """Accumulate exact gradients of the quadrature used in ``batch``.

    Depth gradients on rays whose depth is invalid are ignored. Returns the
    (possibly supplied) accumulator with per-ray ``origin``/``direction``
    gradients attached.
    """
    origins, dirs, cameras = _prep(origins, dirs, cameras, None)
    n = origins.shape[0]
    far = np.ascontiguousarray(np.asarray(far, dtype=float).reshape(-1))
    g_color = np.zeros((n, 3)) if g_color is None else np.asarray(g_color, dtype=float).reshape(n, 3)
    g_depth = np.zeros(n) if g_depth is None else np.asarray(g_depth, dtype=float).reshape(n)
    g_opacity = np.zeros(n) if g_opacity is None else np.asarray(g_opacity, dtype=float).reshape(n).copy()
    g_depth = np.where(batch.valid, g_depth, 0.0)
    safe_o = np.where(batch.valid, batch.opacity, 1.0)
    g_wdepth = g_depth / safe_o
    g_opacity = g_opacity - g_depth * batch.wdepth / (safe_o * safe_o)

    if out is None:
        out = FieldGradients.zeros_like(fld)
    g_app_ray = np.zeros((n, 3))
    g_bg = np.zeros(3)
    g_origin = np.zeros((n, 3))
    g_dir = np.zeros((n, 3))
    app = np.ascontiguousarray(fld.appearance_offsets(cameras))
    bg = np.ascontiguousarray(fld.background)
    kernels.render_backward(
        *fld.kernel_args(), origins, dirs, np.ascontiguousarray(batch.tvals), far, app, bg,
        np.ascontiguousarray(g_color), np.ascontiguousarray(g_wdepth), np.ascontiguousarray(g_opacity),
        out.grid, g_bg, g_app_ray, g_origin, g_dir, batch.t_stop,
    )
    has = cameras >= 0
    if np.any(has) and fld.appearance.shape[0]:
        np.add.at(out.appearance, cameras[has], g_app_ray[has])
    bgc = fld.background
    out.background += g_bg * bgc * (1.0 - bgc)
    if geometry:
        out.origin = g_origin
        out.direction = g_dir
    return out


# -- single-ray API -----------------------------------------------------------


def render_ray(fld: VoxelField, ray: Ray, n_samples: int = DEFAULT_SAMPLES, rng: SampleStream | None = None) -> RenderResult:
    b = render_rays(fld, ray.origin[None], ray.direction[None], [ray.near], [ray.far], [ray.camera], n_samples, rng)
    return RenderResult(b.color[0], float(b.depth[0]), float(b.opacity[0]), bool(b.valid[0]), float(b.residual[0]), b.stream_key)


def render_ray_backward(fld: VoxelField, ray: Ray, n_samples: int, rng: SampleStream | None, upstream: dict,
                        forward: RenderResult | None = None) -> FieldGradients:
    """Gradients of one ray's render w.r.t. field parameters and ray origin/direction.

    ``upstream`` may hold ``color`` (3,), ``depth`` and ``opacity``. When the
    paired ``forward`` result is given its sample stream must match ``rng``.
    """
    key = None if rng is None else rng.key()
    if forward is not None and forward.stream_key != key:
        raise MismatchedForward(f"forward used stream {forward.stream_key}, backward got {key}")
    b = render_rays(fld, ray.origin[None], ray.direction[None], [ray.near], [ray.far], [ray.camera], n_samples, rng)
    g = render_rays_backward(
        fld, ray.origin[None], ray.direction[None], [ray.far], [ray.camera], b,
        g_color=np.asarray(upstream.get("color", np.zeros(3)), dtype=float)[None],
        g_depth=np.array([float(upstream.get("depth", 0.0))]),
        g_opacity=np.array([float(upstream.get("opacity", 0.0))]),
    )
    g.origin = g.origin[0]
    g.direction = g.direction[0]
    return g


def sample_weights(fld: VoxelField, ray: Ray, n_samples: int, rng: SampleStream | None = None):
    """Per-sample (t, weight, transmittance_before) and residual transmittance; diagnostic helper."""
    jit = None if rng is None else rng.jitter(1, n_samples)
    t = stratified_samples([ray.near], [ray.far], n_samples, jit)[0]
    pts = ray.origin + t[:, None] * ray.direction
    sigma, _ = fld.sample(pts)
    delta = np.empty_like(t)
    delta[:-1] = np.diff(t)
    delta[-1] = ray.far - t[-1]
    delta = np.maximum(delta, 0.0)
    step = np.exp(-sigma * delta)
    trans = np.concatenate([[1.0], np.cumprod(step)])
    w = trans[:-1] * (1.0 - step)
    return t, w, trans[:-1], float(trans[-1])


def coarse_to_fine_decay(epoch: int, n_levels: int = 3, lam_max: float = LAMBDA_MAX, coarse_epochs: int | None = None,
                         epochs: int = 15) -> np.ndarray:
    """Per-level L2 coefficients: ``lam_max`` on levels >= 2 while ``epoch < coarse_epochs``, else 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if coarse_epochs is None:
        coarse_epochs = math.ceil(epochs / 3)
    lam = np.zeros(n_levels)
    if epoch < coarse_epochs:
        lam[2:] = lam_max
    return lam
