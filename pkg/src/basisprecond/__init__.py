"""Diagonal preconditioning in configurable orthonormal bases.

A small library plus experiment harness for studying how the choice of
preconditioning basis (identity, curvature eigenbasis, Kronecker-factored
eigenbasis, or a geodesic interpolation between them) interacts with the
choice of per-coordinate scaling (Adam-style running gradient moments, or
powers of the curvature diagonal) under full-batch and single-sample
gradients.
"""

from . import harness, linalg, models, preconditioner, tasks, theory
from .harness import RunConfig, TrajectoryRecord, run, sweep
from .linalg import KronFactors, OrthoMatrix, SymMatrix

__all__ = [
    "harness",
    "linalg",
    "models",
    "preconditioner",
    "tasks",
    "theory",
    "RunConfig",
    "TrajectoryRecord",
    "run",
    "sweep",
    "KronFactors",
    "OrthoMatrix",
    "SymMatrix",
]

__version__ = "0.1.0"
