"""Legendre graph convolution, sparsemax attention and pose metrics in numpy."""

__version__ = "0.1.0"
