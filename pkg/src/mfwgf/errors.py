"""Structured exceptions shared across the package."""

from __future__ import annotations

__all__ = [
    "MfwgfError",
    "DimensionMismatch",
    "NonFiniteValue",
    "SizeCapExceeded",
    "UnsupportedModel",
    "SolverFailure",
    "ConfigError",
    "StepSizeWarning",
    "StationarityWarning",
    "AcceptanceRateWarning",
]


class MfwgfError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MfwgfError, ValueError):
    """Operands disagree on a dimension or layout."""

    def __init__(self, message: str, expected=None, got=None):
        if expected is not None or got is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class NonFiniteValue(MfwgfError, FloatingPointError):
    """A numeric quantity came out NaN/inf; ``where`` names the offending indices."""

    def __init__(self, message: str, **where):
        self.where = where
        if where:
            loc = ", ".join(f"{k}={v}" for k, v in where.items())
            message = f"{message} at {loc}"
        super().__init__(message)


class SizeCapExceeded(MfwgfError, ValueError):
    """A problem is too large for the exact algorithm; the message names the fallback."""


class UnsupportedModel(MfwgfError, ValueError):
    """The operation is defined only for a restricted model family."""


class SolverFailure(MfwgfError, RuntimeError):
    """An inner iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class ConfigError(MfwgfError, ValueError):
    """An experiment config failed schema validation; the message carries the
    dotted path of the offending key."""


class StepSizeWarning(UserWarning):
    """The step size exceeds the 1/(2L+1) guard for the measured drift Lipschitz bound."""


class StationarityWarning(UserWarning):
    """A fixed-point estimate moved more than expected near the end of its run."""


class AcceptanceRateWarning(UserWarning):
    """A Metropolis acceptance rate fell outside the healthy [0.05, 0.8] band."""
