"""Multi-resolution dense voxel field: density + color features per vertex."""

from __future__ import annotations

import numpy as np

from .._native import kernels

DEFAULT_RESOLUTIONS = (32, 64, 128)
DEFAULT_DENSITY_SCALE = 10.0
APPEARANCE_DIM = 3
N_FEATURES = 4  # density logit + 3 color logits


def _logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-6, 1 - 1e-6)
    return np.log(p / (1.0 - p))


class VoxelField:
    """Axis-aligned box holding one dense feature grid per resolution level.

    Features from all levels are trilinearly interpolated and summed, then
    decoded as ``sigma = softplus(density_scale * f0)`` and
    ``rgb = sigmoid(f1:4 + appearance[camera])``. The appearance table holds a
    per-camera color-logit offset; rays without a camera use zero.
    The background color is stored as logits so it stays inside (0, 1).
    """

    def __init__(self, lo, hi, resolutions=DEFAULT_RESOLUTIONS, n_cameras: int = 0,
                 density_scale: float = DEFAULT_DENSITY_SCALE, background=(0.5, 0.5, 0.5)):
        self.lo = np.array(lo, dtype=float).reshape(3)
        self.hi = np.array(hi, dtype=float).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("field bounds must have positive extent")
        res = np.array([(r, r, r) if np.ndim(r) == 0 else tuple(r) for r in resolutions], dtype=np.int64)
        if res.ndim != 2 or res.shape[1] != 3 or np.any(res < 2):
            raise ValueError("level resolutions must be ints or (rx, ry, rz) triples, all >= 2")
        if any(np.any(b < a) or np.all(b == a) for a, b in zip(res, res[1:])):
            raise ValueError("level resolutions must increase from level to level")
        self.resolutions = res
        sizes = [int(np.prod(r)) * N_FEATURES for r in res]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.grid = np.zeros(int(sum(sizes)))
        self.appearance = np.zeros((int(n_cameras), APPEARANCE_DIM))
        self.background_logit = _logit(background)
        self.density_scale = float(density_scale)

    @classmethod
    def for_box(cls, lo, hi, finest: int = 128, n_levels: int = 3, **kw) -> "VoxelField":
        """Levels with near-cubic voxels: ``finest`` vertices along the longest axis, halving per level."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        ext = hi - lo
        res = []
        for lvl in range(n_levels):
            n = max(2, int(round(finest / 2 ** (n_levels - 1 - lvl))))
            h = ext.max() / (n - 1)
            res.append(tuple(max(2, int(np.ceil(e / h - 1e-9)) + 1) for e in ext))
        return cls(lo, hi, res, **kw)

    # -- parameter access ------------------------------------------------

    @property
    def n_levels(self) -> int:
        return self.resolutions.shape[0]

    def level(self, lvl: int) -> np.ndarray:
        """View of level ``lvl`` as (Rx, Ry, Rz, 4)."""
        rx, ry, rz = (int(r) for r in self.resolutions[lvl])
        return self.grid[self.level_slice(lvl)].reshape(rx, ry, rz, N_FEATURES)

    def level_slice(self, lvl: int) -> slice:
        o = int(self.offsets[lvl])
        return slice(o, o + int(np.prod(self.resolutions[lvl])) * N_FEATURES)

    @property
    def background(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.background_logit))

    def vertex_position(self, lvl: int, i: int, j: int, k: int) -> np.ndarray:
        r = self.resolutions[lvl]
        return self.lo + (self.hi - self.lo) * np.array([i, j, k], dtype=float) / (r - 1)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"grid": self.grid, "appearance": self.appearance, "background": self.background_logit}

    def blocks(self, prefix: str = "field") -> dict[str, np.ndarray]:
        out = {
            f"{prefix}/meta": np.concatenate(
                [self.lo, self.hi, [self.density_scale, self.appearance.shape[0]], self.resolutions.reshape(-1).astype(float)]
            ),
            f"{prefix}/background": self.background_logit,
            f"{prefix}/appearance": self.appearance.reshape(-1),
        }
        for lvl in range(self.n_levels):
            out[f"{prefix}/level{lvl}"] = self.grid[self.level_slice(lvl)]
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], prefix: str = "field") -> "VoxelField":
        meta = blocks[f"{prefix}/meta"]
        res = [tuple(int(x) for x in r) for r in meta[8:].reshape(-1, 3)]
        f = cls(meta[:3], meta[3:6], res, n_cameras=int(meta[7]), density_scale=meta[6])
        f.background_logit[...] = blocks[f"{prefix}/background"]
        f.appearance[...] = blocks[f"{prefix}/appearance"].reshape(f.appearance.shape)
        for lvl in range(f.n_levels):
            f.grid[f.level_slice(lvl)] = blocks[f"{prefix}/level{lvl}"]
        return f

    def copy(self) -> "VoxelField":
        f = VoxelField.__new__(VoxelField)
        f.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return f

    def appearance_offsets(self, cameras) -> np.ndarray:
        """Per-ray color-logit offsets for camera indices (-1 = none)."""
        cameras = np.asarray(cameras, dtype=np.int64).reshape(-1)
        out = np.zeros((cameras.size, APPEARANCE_DIM))
        has = cameras >= 0
        if np.any(has):
            out[has] = self.appearance[cameras[has]]
        return out

    def kernel_args(self):
        return (self.grid, self.offsets, self._res_flat, self.lo, self.hi, self.density_scale)

    @property
    def _res_flat(self) -> np.ndarray:
        return np.ascontiguousarray(self.resolutions.reshape(-1))

    # -- queries ------------------------------------------------------------

    def sample(self, points, cameras=None) -> tuple[np.ndarray, np.ndarray]:
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        if cameras is None:
            app = np.zeros((pts.shape[0], APPEARANCE_DIM))
        else:
            app = self.appearance_offsets(np.broadcast_to(np.asarray(cameras), (pts.shape[0],)))
        return kernels.sample_points(*self.kernel_args(), pts, np.ascontiguousarray(app))

    def density(self, points) -> np.ndarray:
        return self.sample(points)[0]


def sample_field(field: VoxelField, point, camera: int | None = None) -> tuple[float, np.ndarray]:
    """Decoded (density, rgb) at one point. Points outside the box have zero density."""
    sigma, rgb = field.sample(np.asarray(point, dtype=float).reshape(1, 3), None if camera is None else [camera])
    return float(sigma[0]), rgb[0]
