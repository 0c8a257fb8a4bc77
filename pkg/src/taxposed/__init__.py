"""Distributional cross-pose prediction for multimodal relative placement."""

__version__ = "0.1.0"
