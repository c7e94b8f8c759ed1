"""Explicit 3D Gaussian-splat memory for class-agnostic video segmentation."""

__version__ = "0.1.0"

from .errors import (CapacityError, ConfigError, DataError, NumericalError,
                     SplatMemError)

__all__ = [
    "CapacityError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "SplatMemError",
    "__version__",
]
