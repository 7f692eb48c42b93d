"""Differentiable scene representation: voxel field, volume rendering, mesh extraction."""

from __future__ import annotations

import math

from ..mesh import Mesh, extract_isosurface
from .render import (
    DEFAULT_SAMPLES,
    EPS_OPACITY,
    FieldGradients,
    Ray,
    RenderBatch,
    RenderResult,
    SampleStream,
    coarse_to_fine_decay,
    ray_box_bounds,
    render_ray,
    render_ray_backward,
    render_rays,
    render_rays_backward,
    sample_weights,
    stratified_samples,
)
from .voxel import VoxelField, sample_field

# density at which a 10 cm slab reaches alpha = 0.5
SURFACE_ISO = math.log(2.0) / 0.10


def surface_iso(field: VoxelField) -> float:
    """Density at which one finest voxel (at least 10 cm) reaches alpha = 0.5.

    A grid cannot represent a surface thinner than its voxels, so the level
    follows the finest spacing on coarse grids.
    """
    spacing = (field.hi - field.lo) / (field.resolutions[-1] - 1)
    return math.log(2.0) / max(0.10, float(spacing.max()))


def extract_mesh(field: VoxelField, iso: float | None = None, resolution: int = 128) -> Mesh:
    """Isosurface ``{sigma = iso}`` of the field over its bounding box, in world coordinates."""
    iso = surface_iso(field) if iso is None else iso
    return extract_isosurface(field.density, field.lo, field.hi, iso, resolution)


__all__ = [
    "DEFAULT_SAMPLES", "EPS_OPACITY", "SURFACE_ISO", "FieldGradients", "Mesh", "Ray", "RenderBatch",
    "RenderResult", "SampleStream", "VoxelField", "coarse_to_fine_decay", "extract_mesh", "ray_box_bounds",
    "render_ray", "render_ray_backward", "render_rays", "render_rays_backward", "sample_field",
    "sample_weights", "stratified_samples", "surface_iso",
]
