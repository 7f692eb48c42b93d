"""Procedural synthetic world with an exact ray-intersection oracle.

The world is an open-topped room: a ground plane at z = 0 and four walls on
the region boundary, furnished with yawed boxes, vertical cylinders and
spheres. Every surface carries a smooth solid texture (a function of the 3D
hit point) so photometric gradients exist everywhere. Shading is Lambertian
against a fixed sun direction plus an ambient term, hence view independent.
Rays leaving through the open top see a constant sky color.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SKY_COLOR = np.array([0.55, 0.70, 0.90])
SUN_DIR = np.array([0.35, 0.25, 0.90]) / np.linalg.norm([0.35, 0.25, 0.90])
AMBIENT = 0.55

# primitive ids: 0 ground, 1..4 walls (-x, +x, -y, +y), then boxes, cylinders, spheres
GROUND_ID = 0
N_WALLS = 4
TEXTURE_KINDS = ("checker", "gradient", "noise")


@dataclass
class WorldSpec:
    n_boxes: int = 8
    n_cylinders: int = 4
    n_spheres: int = 4
    lo: tuple = (-12.0, -12.0, 0.0)
    hi: tuple = (12.0, 12.0, 5.0)
    # objects keep this distance from the ring the default trajectory drives on
    path_radius: float = 7.0
    path_clearance: float = 2.2

    def __post_init__(self):
        if min(self.n_boxes, self.n_cylinders, self.n_spheres) < 0:
            raise ValueError("primitive counts must be non-negative")
        if any(b <= a for a, b in zip(self.lo, self.hi)):
            raise ValueError("world region must have positive extent")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for k in ("lo", "hi"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "n_boxes": self.n_boxes, "n_cylinders": self.n_cylinders, "n_spheres": self.n_spheres,
            "lo": list(self.lo), "hi": list(self.hi),
            "path_radius": self.path_radius, "path_clearance": self.path_clearance,
        }


@dataclass
class Texture:
    kind: str
    color_a: np.ndarray
    color_b: np.ndarray
    freqs: np.ndarray  # (K, 3) angular wave vectors, rad/m
    phases: np.ndarray  # (K,)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        arg = p @ self.freqs.T + self.phases  # (N, K)
        if self.kind == "checker":
            s = np.prod(np.sin(arg[:, :3]), axis=1)
            u = 0.5 + 0.5 * np.tanh(6.0 * s)
        elif self.kind == "gradient":
            u = 0.5 + 0.5 * np.sin(arg[:, 0])
        else:
            s = np.sum(np.sin(arg), axis=1) / np.sqrt(0.5 * arg.shape[1])
            u = 0.5 + 0.5 * np.tanh(s)
        return self.color_a + u[:, None] * (self.color_b - self.color_a)


def _random_texture(rng: np.random.Generator, kind: str | None = None) -> Texture:
    kind = kind or TEXTURE_KINDS[int(rng.integers(len(TEXTURE_KINDS)))]
    a = rng.uniform(0.05, 0.45, 3)
    b = rng.uniform(0.55, 0.95, 3)
    n_waves = 3 if kind == "checker" else 5
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if kind == "checker":
        dirs = np.eye(3)
        periods = np.full(3, rng.uniform(0.8, 1.6))
    else:
        periods = rng.uniform(0.5, 2.5, n_waves)
    freqs = dirs * (2.0 * np.pi / periods)[:, None]
    return Texture(kind, a, b, freqs, rng.uniform(0.0, 2.0 * np.pi, freqs.shape[0]))


@dataclass
class SyntheticWorld:
    lo: np.ndarray
    hi: np.ndarray
    boxes: np.ndarray  # (B, 7): center xyz, half extents xyz, yaw
    cylinders: np.ndarray  # (C, 4): center x, y, radius, height
    spheres: np.ndarray  # (S, 4): center xyz, radius
    textures: list = field(default_factory=list)  # one per primitive id
    seed: int = 0

    @property
    def n_primitives(self) -> int:
        return 1 + N_WALLS + len(self.boxes) + len(self.cylinders) + len(self.spheres)

    def primitive_list(self) -> list[tuple]:
        """Flat description of every primitive, for equality checks."""
        out = [("ground",), *[("wall", i) for i in range(N_WALLS)]]
        out += [("box", *map(float, b)) for b in self.boxes]
        out += [("cylinder", *map(float, c)) for c in self.cylinders]
        out += [("sphere", *map(float, s)) for s in self.spheres]
        return out

    # -- intersection ---------------------------------------------------------

    def raycast(self, origins, dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest hit (t, primitive id, unit normal) per ray; t = inf and id = -1 for sky."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        n = o.shape[0]
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        normal = np.zeros((n, 3))

        def take(t, pid, nrm):
            better = t < best_t
            if np.any(better):
                best_t[better] = t[better]
                best_id[better] = pid if np.isscalar(pid) else pid[better]
                normal[better] = nrm[better] if nrm.ndim == 2 else nrm

        self._room(o, d, take)
        base = 1 + N_WALLS
        for i, b in enumerate(self.boxes):
            t, nrm = _ray_box(o, d, b)
            take(t, base + i, nrm)
        base += len(self.boxes)
        for i, c in enumerate(self.cylinders):
            t, nrm = _ray_cylinder(o, d, c)
            take(t, base + i, nrm)
        base += len(self.cylinders)
        for i, s in enumerate(self.spheres):
            t, nrm = _ray_sphere(o, d, s)
            take(t, base + i, nrm)
        return best_t, best_id, normal

    def _room(self, o, d, take):
        # exit through the region box from inside; the top face is open sky
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t_lo = (self.lo - o) * inv
            t_hi = (self.hi - o) * inv
        t_exit = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
        ax = np.argmin(t_exit, axis=1)
        t = t_exit[np.arange(o.shape[0]), ax]
        pos = d[np.arange(o.shape[0]), ax] > 0
        # face id: ground for -z, walls for x/y, sky for +z
        pid = np.where(ax == 2, np.where(pos, -1, GROUND_ID), 1 + 2 * ax + pos.astype(np.int64))
        nrm = np.zeros_like(o)
        nrm[np.arange(o.shape[0]), ax] = np.where(pos, -1.0, 1.0)
        t = np.where((pid >= 0) & (t > 0), t, np.inf)
        take(t, pid, nrm)

    # -- shading ----------------------------------------------------------------

    def shade(self, points, pid, normal) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.tile(SKY_COLOR, (points.shape[0], 1))
        lam = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ SUN_DIR, 0.0, 1.0)
        for k in np.unique(pid):
            if k < 0:
                continue
            sel = pid == k
            out[sel] = self.textures[k].albedo(points[sel]) * lam[sel, None]
        return out

    def render(self, origins, dirs, chunk: int = 1 << 15) -> tuple[np.ndarray, np.ndarray]:
        """Colors (N,3) and hit distances (N,) along unit directions."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        if o.shape[0] == 1 and d.shape[0] > 1:
            o = np.broadcast_to(o, d.shape)
        color = np.empty((d.shape[0], 3))
        depth = np.empty(d.shape[0])
        for s in range(0, d.shape[0], chunk):
            t, pid, nrm = self.raycast(o[s : s + chunk], d[s : s + chunk])
            pts = o[s : s + chunk] + np.where(np.isfinite(t), t, 0.0)[:, None] * d[s : s + chunk]
            color[s : s + chunk] = self.shade(pts, pid, nrm)
            depth[s : s + chunk] = t
        return color, depth

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)


def _ray_box(o, d, box):
    c, h, yaw = box[:3], box[3:6], box[6]
    cs, sn = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cs, -sn, 0.0], [sn, cs, 0.0], [0.0, 0.0, 1.0]])  # local -> world
    ol = (o - c) @ rot
    dl = d @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t0 = (-h - ol) * inv
        t1 = (h - ol) * inv
    tn = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tf = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    ax = np.argmax(tn, axis=1)
    t_near = tn[np.arange(o.shape[0]), ax]
    t_far = np.min(tf, axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    nl = np.zeros_like(o)
    nl[np.arange(o.shape[0]), ax] = -np.sign(dl[np.arange(o.shape[0]), ax])
    return np.where(hit, t_near, np.inf), nl @ rot.T


def _ray_cylinder(o, d, cyl):
    cx, cy, r, height = cyl
    ox, oy = o[:, 0] - cx, o[:, 1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
    z = o[:, 2] + t_side * d[:, 2]
    side_hit = ok & (t_side > 1e-9) & (z >= 0.0) & (z <= height)
    t = np.where(side_hit, t_side, np.inf)
    nrm = np.zeros_like(o)
    px = ox + t_side * d[:, 0]
    py = oy + t_side * d[:, 1]
    nrm[:, 0] = px / r
    nrm[:, 1] = py / r
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (height - o[:, 2]) / d[:, 2]
    qx = ox + t_cap * d[:, 0]
    qy = oy + t_cap * d[:, 1]
    cap_hit = (t_cap > 1e-9) & (qx * qx + qy * qy <= r * r) & (d[:, 2] < 0) & (t_cap < t)
    t = np.where(cap_hit, t_cap, t)
    nrm[cap_hit] = (0.0, 0.0, 1.0)
    return t, nrm


def _ray_sphere(o, d, sph):
    c, r = sph[:3], sph[3]
    oc = o - c
    b = np.sum(oc * d, axis=1)
    cc = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - cc
    ok = disc >= 0
    t = -b - np.sqrt(np.where(ok, disc, 0.0))
    hit = ok & (t > 1e-9)
    t = np.where(hit, t, np.inf)
    p = oc + np.where(hit, t, 0.0)[:, None] * d
    return t, p / r


def _placement_ok(xy, radius, spec: WorldSpec) -> bool:
    lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
    if np.any(xy - radius < lo[:2] + 0.3) or np.any(xy + radius > hi[:2] - 0.3):
        return False
    ring = abs(float(np.hypot(*xy)) - spec.path_radius)
    return ring > spec.path_clearance + radius


def _sample_xy(rng, radius, spec: WorldSpec, tries: int = 1000):
    lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
    for _ in range(tries):
        xy = rng.uniform(lo[:2], hi[:2])
        if _placement_ok(xy, radius, spec):
            return xy
    raise ValueError("could not place primitive inside the region; enlarge it or reduce the count")


def generate_world(spec: WorldSpec | None = None, seed: int = 0) -> SyntheticWorld:
    """Deterministic furnished room for ``seed``."""
    spec = spec or WorldSpec()
    rng = np.random.default_rng(seed)
    z_top = spec.hi[2]
    boxes = []
    for _ in range(spec.n_boxes):
        half = rng.uniform([0.3, 0.3, 0.3], [1.0, 1.0, min(1.5, 0.45 * z_top)])
        xy = _sample_xy(rng, float(np.hypot(half[0], half[1])), spec)
        boxes.append([xy[0], xy[1], half[2], *half, rng.uniform(0, np.pi)])
    cylinders = []
    for _ in range(spec.n_cylinders):
        r = rng.uniform(0.2, 0.6)
        xy = _sample_xy(rng, r, spec)
        cylinders.append([xy[0], xy[1], r, rng.uniform(1.0, 0.9 * z_top)])
    spheres = []
    for _ in range(spec.n_spheres):
        r = rng.uniform(0.3, 0.9)
        xy = _sample_xy(rng, r, spec)
        spheres.append([xy[0], xy[1], r + rng.uniform(0.0, 1.5), r])
    n_obj = spec.n_boxes + spec.n_cylinders + spec.n_spheres
    textures = [_random_texture(rng, "noise")]
    textures += [_random_texture(rng, "noise") for _ in range(N_WALLS)]
    textures += [_random_texture(rng) for _ in range(n_obj)]
    return SyntheticWorld(
        lo=np.array(spec.lo, dtype=float),
        hi=np.array(spec.hi, dtype=float),
        boxes=np.array(boxes, dtype=float).reshape(-1, 7),
        cylinders=np.array(cylinders, dtype=float).reshape(-1, 4),
        spheres=np.array(spheres, dtype=float).reshape(-1, 4),
        textures=textures,
        seed=seed,
    )
