"""Imbalance-aware volumetric segmentation losses, a small numpy 3D network,
sliding-window inference with max-fusion, and a synthetic phantom harness."""

__version__ = "0.1.0"
