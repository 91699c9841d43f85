"""Dual-energy CT multi-organ segmentation with a self-contained 3D U-Net cascade."""

__version__ = "0.1.0"
