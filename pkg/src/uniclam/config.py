"""Run configuration: one flat JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


CHOICES = {
    "mask_semantics": ("occlude", "keep"),
    "augmentation": ("adversarial", "random"),
    "sharing": ("gradual", "hard", "none"),
    "unified": ("joint", "sequential"),
    "dtype": ("float32", "float64"),
}


@dataclass
class RunConfig:
    # encoder geometry
    K: int = 4
    h: int = 32
    heads: int = 4
    proj_dim: int = 16
    patch_size: int = 4
    image_size: int = 32
    vocab_size: int = 64
    q_max: int = 12
    mlp_ratio: int = 2
    use_positional: bool = True
    # masking models
    N_v: int = 4
    N_t: int = 2
    mask_channels: int = 8
    text_mask_layers: int = 3
    # objective
    tau: float = 0.1
    beta: float = 0.3
    lam: float = 1e-3
    # optimisation
    lr: float = 1e-3
    mask_lr: float | None = None
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 16
    steps: int = 2000
    mask_steps_per_step: int = 1
    seed: int = 0
    dtype: str = "float32"
    # ablation axes
    mask_semantics: str = "occlude"
    augmentation: str = "adversarial"
    sharing: str = "gradual"
    unified: str = "joint"
    # fine-tune / evaluation
    finetune_steps: int = 300
    finetune_batch: int = 32
    finetune_lr: float = 1e-3
    freeze_encoders: bool = False
    eval_fraction: float = 0.2
    head_hidden: int = 64
    # artifacts
    record_wall_time: bool = False
    export_count: int = 4
    iou_threshold: float = 0.5

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.N_v < 1 or self.N_t < 1:
            raise ConfigError("mask counts must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.h % self.heads:
            raise ConfigError(f"h={self.h} not divisible by heads={self.heads}")
        if self.proj_dim < 2:
            raise ConfigError("proj_dim must be >= 2")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.image_size % self.patch_size or self.image_size % 4:
            raise ConfigError("image_size must be divisible by patch_size and by 4")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1)")
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    @property
    def mask_learning_rate(self) -> float:
        return self.lr if self.mask_lr is None else self.mask_lr

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_config(path: str | Path | None, **overrides: Any) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)
