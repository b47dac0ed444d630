"""Spectral-spatial contrastive clustering for hyperspectral image cubes."""

__version__ = "0.1.0"
