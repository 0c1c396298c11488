"""Deformable window-attention U-Net transformer for undersampled MRI
reconstruction, built on a small numpy tensor engine with reverse-mode
differentiation."""

from .engine import Tensor, backward, gradients, precision, set_dtype
from .model import ModelConfig, init_params, model_forward, preset_config

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "gradients",
    "precision",
    "set_dtype",
    "ModelConfig",
    "init_params",
    "model_forward",
    "preset_config",
    "__version__",
]
