from .config import VARIANTS, ConfigError, ModelConfig
from .vit import ViT, build_model, patchify

__all__ = ["VARIANTS", "ConfigError", "ModelConfig", "ViT", "build_model", "patchify"]
