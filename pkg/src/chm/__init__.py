"""Convolutional Hough matching: high-dimensional convolution over correlation tensors."""

__version__ = "0.1.0"
