"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class BpreError(Exception):
    """Base class for every error raised by the package."""


class StructuralError(BpreError, ValueError):
    """Malformed transition matrix or non-primitive kernel."""


class MomentError(BpreError, ValueError):
    """Offspring law violating the moment conditions."""


class UnsupportedRescaleError(BpreError, ValueError):
    """Offspring family without a canonical way to rescale its mean."""


class ConsistencyError(BpreError, ValueError):
    """Inputs that are individually valid but do not fit together."""


class InfeasibleTargetError(BpreError, ValueError):
    """Calibration target that cannot be reached."""


class RegimeError(BpreError, ValueError):
    """Operation requested outside the regime where it is defined."""


class ConvergenceError(BpreError, RuntimeError):
    """Iterative solver exhausted its budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class NumericalError(BpreError, RuntimeError):
    """Internal cross-check failed beyond its tolerance."""


class SizeError(BpreError, ValueError):
    """Exact computation too large to run."""


class FeasibilityError(BpreError, RuntimeError):
    """Monte Carlo budget insufficient for the requested quantity."""


class ConfigurationError(BpreError, ValueError):
    """Inconsistent run configuration or estimate metadata."""


class DomainError(BpreError, ValueError):
    """Argument outside the mathematical domain of the operation."""
