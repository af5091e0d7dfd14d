"""Gaussian anomaly detection with fine-tuned convolutional features."""

__version__ = "0.1.0"

from . import errors  # noqa: F401

__all__ = ["errors", "__version__"]
