"""Crack segmentation with linear-attention context and gated skip connections, on numpy."""

from .model import ContextCrackNet, ModelConfig

__version__ = "0.1.0"
__all__ = ["ContextCrackNet", "ModelConfig"]
