"""Sparse 3D convolution engine and a desk-scale LiDAR segmentation pipeline."""

__version__ = "0.1.0"
