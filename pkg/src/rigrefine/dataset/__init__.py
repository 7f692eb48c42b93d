"""Dataset format, synthetic generator and pose-noise tooling."""

from .io import (
    read_collection,
    read_dataset,
    read_ground_truth,
    read_poses,
    scene_dirs,
    write_dataset,
    write_poses,
)
from .ops import MASK_MARGIN, PRESETS, Box3D, apply_masks, perturb, perturb_collection, split_subsequences
from .synthetic import (
    LidarSpec,
    TrajectorySpec,
    capture,
    default_rig,
    generate_tracks,
    generate_trajectory,
)
from .types import GroundTruthRecord, KeypointTrack, NoiseSpec, SceneDataset, SensorFrame
from .world import SyntheticWorld, WorldSpec, generate_world

__all__ = [
    "Box3D", "GroundTruthRecord", "KeypointTrack", "LidarSpec", "MASK_MARGIN", "NoiseSpec", "PRESETS",
    "SceneDataset", "SensorFrame", "SyntheticWorld", "TrajectorySpec", "WorldSpec", "apply_masks", "capture",
    "default_rig", "generate_tracks", "generate_trajectory", "generate_world", "perturb", "perturb_collection",
    "read_collection", "read_dataset", "read_ground_truth", "read_poses", "scene_dirs", "split_subsequences",
    "write_dataset", "write_poses",
]
