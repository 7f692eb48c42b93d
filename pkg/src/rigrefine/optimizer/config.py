"""Training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

DOWNSCALE_FACTORS = (1, 2, 4, 6, 8)
DEFAULT_EPOCHS = 15
DEFAULT_NVS_EPOCHS = 10


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    nvs_epochs: int = DEFAULT_NVS_EPOCHS
    steps_per_epoch: int = 100
    rays_per_batch: int = 2048
    camera_fraction: float = 0.75
    lr_field: float = 1e-2
    lr_extrinsic: float = 1e-3
    lr_trajectory: float = 5e-4
    lr_final_fraction: float = 0.1
    warmup_epochs: int = 1
    photo_weight: float = 1.0
    depth_weight: float = 0.1
    downscale: int = 4
    n_samples: int = 64
    t_stop: float = 1e-4
    finest_resolution: int = 128
    n_levels: int = 3
    density_scale: float = 10.0
    lambda_max: float = 1e-2
    field_margin: float = 0.5
    seed: int = 0
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.nvs_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps_per_epoch < 1 or self.rays_per_batch < 2:
            raise ValueError("steps_per_epoch must be >= 1 and rays_per_batch >= 2")
        for name in ("lr_field", "lr_extrinsic", "lr_trajectory"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.downscale not in DOWNSCALE_FACTORS:
            raise ValueError(f"downscale must be one of {DOWNSCALE_FACTORS}")
        if not 0.0 <= self.camera_fraction <= 1.0:
            raise ValueError("camera_fraction must lie in [0, 1]")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig(**d)
