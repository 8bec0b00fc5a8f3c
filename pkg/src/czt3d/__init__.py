"""Voxel charge-transport simulation for pixelated CdZnTe-like detectors and
recovery of per-voxel material coefficients by gradient descent through it."""

__version__ = "0.1.0"
