"""Lateral misregistration estimators for adaptive-optics systems."""

from .errors import (
    DegenerateFitError,
    DegenerateGeometryError,
    EmptyMaskError,
    InputError,
    InstabilityError,
    MisregError,
    NoOverlapError,
    NonConvergenceError,
)
from .forward_model import Misreg

__version__ = "0.1.0"

__all__ = [
    "DegenerateFitError",
    "DegenerateGeometryError",
    "EmptyMaskError",
    "InputError",
    "InstabilityError",
    "Misreg",
    "MisregError",
    "NoOverlapError",
    "NonConvergenceError",
    "__version__",
]
