from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

VARIANTS = ("vanilla-cls", "vanilla-meanpool", "windowed", "gridblock")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Toy transformer hyper-parameters.

    ``depth`` counts attention-MLP blocks for the vanilla and windowed
    variants and (conv, block-attention, grid-attention) units for
    ``gridblock``. ``patch_grid`` is the number of tokens per image side.
    """

    variant: str = "vanilla-cls"
    depth: int = 4
    heads: int = 4
    dim: int = 32
    patch_grid: int = 4
    window: int = 4
    seed: int = 0
    image_size: int = 32
    channels: int = 3
    mlp_ratio: int = 2
    stages: int = 2
    shift: bool = True

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 1 or self.heads < 1 or self.dim < 1:
            raise ConfigError("depth, heads and dim must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_grid:
            raise ConfigError(f"image size {self.image_size} not divisible by patch grid {self.patch_grid}")
        if self.variant in ("windowed", "gridblock"):
            if self.window < 1 or self.patch_grid % self.window:
                raise ConfigError(f"patch_grid {self.patch_grid} not divisible by window {self.window}")
        if self.variant == "windowed":
            if self.stages < 1 or self.depth < self.stages:
                raise ConfigError("windowed variant needs depth >= stages >= 1")
            if self.patch_grid % (2 ** (self.stages - 1)):
                raise ConfigError("patch grid cannot be merged that many times")
            if (self.dim * 2 ** (self.stages - 1)) % self.heads:
                raise ConfigError("merged width not divisible by heads")
        return self

    @property
    def patch_size(self) -> int:
        return self.image_size // self.patch_grid

    @property
    def model_id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"{self.variant}-{hashlib.sha256(blob).hexdigest()[:10]}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()
