"""Attention U-Net segmentation with engineered-feature infusion."""

__version__ = "0.1.0"
