"""Joint refinement of scene fields, extrinsic and trajectory corrections."""

from .config import DEFAULT_EPOCHS, DEFAULT_NVS_EPOCHS, DOWNSCALE_FACTORS, TrainConfig
from .losses import AdamState, LossTerms, adam_step, loss
from .rays import RayBundle, build_rays, downscale_image, pixel_rays
from .trainer import (
    EpochLog,
    SceneBatch,
    SceneTrainer,
    StageResult,
    ext_norms,
    field_bounds,
    lr_factor,
    run_calibration_stage,
    run_trajectory_stage,
    train_field,
)

__all__ = [
    "AdamState", "DEFAULT_EPOCHS", "DEFAULT_NVS_EPOCHS", "DOWNSCALE_FACTORS", "EpochLog", "LossTerms", "RayBundle",
    "SceneBatch", "SceneTrainer", "StageResult", "TrainConfig", "adam_step", "build_rays", "downscale_image",
    "ext_norms", "field_bounds", "loss", "lr_factor", "pixel_rays", "run_calibration_stage", "run_trajectory_stage",
    "train_field",
]
