"""Dynamic-scene reconstruction with semantic motion segmentation and constrained bundle adjustment."""

__version__ = "0.1.0"
