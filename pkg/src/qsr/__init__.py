"""Quantization-aware training and integer inference for convolutional
image super-resolution networks."""

from .backends import NAME as backend_name  # noqa: F401

__version__ = "0.1.0"
