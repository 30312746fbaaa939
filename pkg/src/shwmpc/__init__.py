"""Structured Hammerstein-Wiener models with convex MPC and barrier-filtered LQR."""

from .errors import (ConditioningError, ConfigError, DimensionError, ExcitationRejected, InfeasibleError,
                     ModelUnsuitableError, NonConvergenceError, NotRealizableError, PreconditionError,
                     ShwError, SolverFailure, TrainingFailure)
from .shw import ShwArch, ShwModel

__version__ = "0.1.0"

__all__ = [
    "ShwArch", "ShwModel", "ShwError", "DimensionError", "ConditioningError", "SolverFailure",
    "InfeasibleError", "NonConvergenceError", "ModelUnsuitableError", "NotRealizableError",
    "TrainingFailure", "ConfigError", "ExcitationRejected", "PreconditionError",
]
