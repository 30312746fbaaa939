"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class ShwError(Exception):
    """Base class for toolkit errors."""


class DimensionError(ShwError, ValueError):
    pass


class ConditioningError(ShwError):
    """A matrix that must be nonsingular (layer weight, Jacobian) is not."""


class SolverFailure(ShwError):
    pass


class InfeasibleError(ShwError):
    """Raised when a QP has no feasible point. ``rows`` lists offending constraints."""

    def __init__(self, message: str, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class NonConvergenceError(SolverFailure):
    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ModelUnsuitableError(ShwError):
    """Discrete input matrix singular, so the convex OCP is not well posed."""


class NotRealizableError(ShwError):
    """Target (d, r) admits no equilibrium with an admissible input."""


class TrainingFailure(ShwError):
    def __init__(self, message: str, epoch: int = -1):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(ShwError, ValueError):
    pass


class ExcitationRejected(ShwError):
    """Plant state diverged under the requested excitation."""


class PreconditionError(ShwError, ValueError):
    """An operation was called outside its domain (e.g. initial state already violates a ceiling)."""
