"""Strict-feedback form construction for heterodirectional hyperbolic systems."""

__version__ = "0.1.0"

from .model import (
    Grid1D,
    HyperbolicSystem,
    MatrixField1D,
    PdeOdeSystem,
    SqKernelField,
    StateSnapshot,
    Trajectory,
    TriKernelField,
    validate_system,
)

__all__ = [
    "Grid1D",
    "MatrixField1D",
    "TriKernelField",
    "SqKernelField",
    "HyperbolicSystem",
    "PdeOdeSystem",
    "StateSnapshot",
    "Trajectory",
    "validate_system",
    "__version__",
]
