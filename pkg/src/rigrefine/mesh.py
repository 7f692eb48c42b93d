"""Triangle meshes: isosurface extraction and BVH-accelerated point-to-mesh distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from ._native import kernels
from .errors import EmptyMesh

LEAF_SIZE = 8


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def triangles(self) -> np.ndarray:
        return np.ascontiguousarray(self.vertices[self.faces], dtype=float)

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "Mesh":
        return Mesh(self.vertices @ np.asarray(rotation).T + translation, self.faces)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def extract_isosurface(density_fn, lo, hi, iso: float, resolution: int) -> Mesh:
    """Marching-cubes mesh of ``{density = iso}`` sampled on ``resolution`` voxels per axis."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.linspace(lo[a], hi[a], resolution + 1) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = np.asarray(density_fn(pts), dtype=float).reshape((resolution + 1,) * 3)
    if not (vol.min() < iso < vol.max()):
        raise EmptyMesh(f"no crossing of iso level {iso} (density range {vol.min():.3g}..{vol.max():.3g})")
    spacing = tuple((hi - lo) / resolution)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing)
    if faces.shape[0] == 0:
        raise EmptyMesh("isosurface produced no triangles")
    return Mesh(verts + lo, faces.astype(np.int64))


# --------------------------------------------------------------------------
# BVH
# --------------------------------------------------------------------------


@dataclass
class BVH:
    tris: np.ndarray  # (F, 3, 3), reordered so leaves are contiguous
    order: np.ndarray  # original face index for each reordered triangle
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray  # > 0 for leaves


def build_bvh(tris: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    """Median-split BVH over triangle centroids along the widest axis."""
    tris = np.asarray(tris, dtype=float)
    n = tris.shape[0]
    if n == 0:
        raise EmptyMesh("cannot build a BVH over zero triangles")
    cent = tris.mean(axis=1)
    tlo = tris.min(axis=1)
    thi = tris.max(axis=1)
    order = np.arange(n)
    lo_l, hi_l, left, right, start, count = [], [], [], [], [], []

    def new_node():
        lo_l.append(None)
        hi_l.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(lo_l) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        nd, s, e = stack.pop()
        idx = order[s:e]
        lo_l[nd] = tlo[idx].min(axis=0)
        hi_l[nd] = thi[idx].max(axis=0)
        if e - s <= leaf_size:
            start[nd] = s
            count[nd] = e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        order[s:e] = srt
        mid = s + (e - s) // 2
        ln, rn = new_node(), new_node()
        left[nd], right[nd] = ln, rn
        stack.append((rn, mid, e))
        stack.append((ln, s, mid))
    return BVH(
        tris=np.ascontiguousarray(tris[order]),
        order=order,
        node_lo=np.ascontiguousarray(np.array(lo_l)),
        node_hi=np.ascontiguousarray(np.array(hi_l)),
        node_left=np.array(left, dtype=np.int64),
        node_right=np.array(right, dtype=np.int64),
        node_start=np.array(start, dtype=np.int64),
        node_count=np.array(count, dtype=np.int64),
    )


def point_mesh_distances(points, mesh: Mesh | BVH, chunk: int = 1 << 16) -> np.ndarray:
    """Unsigned distance from each point to the nearest triangle (BVH traversal)."""
    bvh = mesh if isinstance(mesh, BVH) else build_bvh(mesh.triangles())
    points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        d2 = kernels.point_mesh_dist2_bvh(
            np.ascontiguousarray(points[s : s + chunk]), bvh.tris, bvh.node_lo, bvh.node_hi,
            bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
        )
        out[s : s + chunk] = np.sqrt(d2)
    return out


def point_mesh_distances_exhaustive(points, mesh: Mesh) -> np.ndarray:
    """Reference path: every point against every triangle."""
    points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return np.sqrt(kernels.point_mesh_dist2_brute(points, mesh.triangles()))
