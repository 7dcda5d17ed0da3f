"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class PricerError(Exception):
    """Base class for every error raised by the package."""


class InputError(PricerError, ValueError):
    """Malformed or inconsistent input data."""


class DomainError(InputError):
    """A price or weight lies outside its admissible domain."""


class ConfigurationError(InputError):
    """A required setting is missing for the requested operation."""


class RankError(PricerError, ArithmeticError):
    """A covariance matrix is singular or too badly conditioned to invert."""


class SectorRedundancyError(RankError):
    """The second hedge sector adds nothing beyond the first."""


class DegenerateReplicationError(PricerError, ArithmeticError):
    """Zero residual variance paired with a nonzero residual mean."""


class MagnitudeError(PricerError, OverflowError):
    """An exponent is too large to evaluate in double precision."""


class ConvergenceError(PricerError, ArithmeticError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, *, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class PreconditionError(PricerError):
    """An operation was called on an object that does not meet its requirements."""


class CompletenessError(PricerError, ArithmeticError):
    """The hedge instruments do not span the state variables."""


class SolverError(PricerError, ArithmeticError):
    """A numerical solver became unstable."""
