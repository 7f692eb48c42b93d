"""Lidar-to-mesh geometric consistency."""

from __future__ import annotations

import numpy as np

from ..errors import EmptyMesh, NoLidar
from ..mesh import BVH, Mesh, build_bvh, point_mesh_distances

P2M_THRESHOLD = 0.15


def accumulate_lidar(dataset, rig, trajectory) -> np.ndarray:
    """All lidar points of the dataset in the world frame under the given poses."""
    frames = dataset.lidar_frames()
    if not frames:
        raise NoLidar(f"dataset {dataset.name!r} has no lidar frames")
    out = []
    for f in frames:
        m = trajectory.matrices([f.timestamp])[0] @ rig.extrinsic(f.sensor).matrix()
        out.append(np.asarray(f.points, dtype=float) @ m[:3, :3].T + m[:3, 3])
    pts = np.concatenate(out)
    if pts.shape[0] == 0:
        raise NoLidar(f"dataset {dataset.name!r} has no lidar returns")
    return pts


def point_to_mesh_stats(points, mesh: Mesh | BVH, threshold: float = P2M_THRESHOLD) -> tuple[float, float]:
    """(fraction of points closer than ``threshold``, mean distance)."""
    if isinstance(mesh, Mesh) and mesh.n_faces == 0:
        raise EmptyMesh("mesh has no triangles")
    d = point_mesh_distances(points, mesh)
    return float(np.mean(d < threshold)), float(np.mean(d))


def geometric_consistency(dataset, rig, trajectory, mesh: Mesh, threshold: float = P2M_THRESHOLD) -> tuple[float, float]:
    """(precision, mean point-to-mesh distance m) of the pose-accumulated lidar cloud."""
    if mesh is None or mesh.n_faces == 0:
        raise EmptyMesh("mesh has no triangles")
    pts = accumulate_lidar(dataset, rig, trajectory)
    return point_to_mesh_stats(pts, build_bvh(mesh.triangles()), threshold)
