"""Fixed-point part segmentation with per-part rigid-motion invariance."""

__version__ = "0.1.0"
