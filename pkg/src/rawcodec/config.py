from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    latent_channels: int = 64  # M
    hyper_channels: int = 32  # N
    analysis_channels: int = 32
    synthesis_channels: int = 32
    prior_channels: int = 16  # channels of the prior features fed to the head
    context_channels: int = 32
    context_kernel: int = 5
    head_channels: int = 64
    mixtures: int = 5  # K
    scale_min: float = 1e-6
    sigma_min: float = 1e-6
    latent_bound: int = 64  # latents are coded on [-L, L]
    negative_slope: float = 0.01

    def __post_init__(self):
        if not 1 <= self.mixtures <= 10:
            raise ValueError(f"mixture count {self.mixtures} outside [1, 10]")
        if self.context_kernel % 2 == 0 or self.context_kernel < 3:
            raise ValueError("context kernel must be odd and >= 3")
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def stride(self) -> int:
        return 8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    min_batch_size: int = 8
    learning_rate: float = 1e-4
    lr_decay: float = 0.1
    plateau_patience: int = 10
    crop_size: int = 64
    patch_size: int = 128
    flip_probability: float = 0.5
    steps_per_epoch: int | None = None
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    prefetch: int = 4
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "min_batch_size", "learning_rate", "crop_size", "patch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.crop_size > self.patch_size:
            raise ValueError("crop size exceeds patch size")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip probability outside [0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def load_config(path) -> RunConfig:
    data = json.loads(Path(path).read_text())
    return RunConfig(ModelConfig(**data.get("model", {})), TrainConfig(**data.get("train", {})))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=2) + "\n")
