"""Dual-decoder reverse distillation with a class-aware prototype memory for
multi-class unsupervised anomaly detection, on a small numpy autodiff core."""

from .config import RunConfig, load_config, profile
from .model import MDDNet
from .vit import ModelConfig

__all__ = ["MDDNet", "ModelConfig", "RunConfig", "load_config", "profile"]
__version__ = "0.1.0"
