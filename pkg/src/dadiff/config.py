"""Run configuration shared by data generation, training, tracking and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a configuration value is outside its allowed range."""


@dataclass
class RunConfig:
    # diffusion
    T: int = 100
    S: int = 5
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # networks
    C: int = 32
    heads: int = 4
    H: int = 16
    W: int = 16
    disc_time_embed: bool = False
    cond_norm: str = "instance"

    # losses (lambda1 * trc + lambda2 * adv + lambda3 * align)
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0

    # optimisation
    lr_model: float = 0.0015
    lr_disc: float = 0.005
    poly_power: float = 0.8
    epochs: int = 50
    steps_per_epoch: int = 40
    batch_size: int = 2
    pretrain_batch: int = 8
    pretrain_steps: int = 1500
    lr_pretrain: float = 0.002
    freeze_tracker: bool = True
    align_template: bool = True
    max_grad_norm: float | None = None
    mode: str = "paired"
    disc_input: str = "reverse"
    checkpoint_every: int = 10

    # synthetic data
    img_size: int = 160
    frames: int = 24
    sequences: int = 8
    max_target: int = 24
    min_target: int = 10
    max_speed: float = 3.0

    # tracking
    upsample: int = 8

    seed: int = 0
    data_dir: str | None = None
    night_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 1 <= self.S <= self.T:
            raise ConfigError(f"S must lie in [1, T={self.T}], got {self.S}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} is not divisible by heads={self.heads}")
        for name in ("lr_model", "lr_disc", "lr_pretrain"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode not in ("paired", "unpaired"):
            raise ConfigError(f"mode must be 'paired' or 'unpaired', got {self.mode!r}")
        if self.cond_norm not in ("global", "instance"):
            raise ConfigError(f"cond_norm must be 'global' or 'instance', got {self.cond_norm!r}")
        if self.disc_input not in ("reverse", "forward", "both"):
            raise ConfigError(f"unknown disc_input {self.disc_input!r}")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")
        if self.img_size < 128:
            raise ConfigError("img_size must be >= 128")
        if not 2 <= self.min_target <= self.max_target < 25:
            raise ConfigError("target sizes must satisfy 2 <= min_target <= max_target < 25")
        if min(self.batch_size, self.pretrain_batch, self.epochs, self.steps_per_epoch) < 1:
            raise ConfigError("batch sizes, epochs and steps_per_epoch must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)
