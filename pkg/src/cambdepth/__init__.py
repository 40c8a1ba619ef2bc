"""Monocular depth estimation with convolutional attention on a small autodiff engine."""

__version__ = "0.1.0"
