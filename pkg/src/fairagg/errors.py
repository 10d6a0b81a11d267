"""Exception hierarchy.

Everything raised deliberately by the package derives from
:class:`FairAggError`, so callers (and the CLI) can separate data or
numeric failures from programming errors.
"""

from __future__ import annotations


class FairAggError(Exception):
    """Base class for all package errors."""


class DimensionError(FairAggError, ValueError):
    """Inputs disagree on the feature dimension or on a matrix shape."""

    def __init__(self, message: str, bank: int | None = None):
        super().__init__(message)
        self.bank = bank


class NotPositiveDefiniteError(FairAggError, ValueError):
    def __init__(self, message: str, bank: int | None = None):
        super().__init__(message)
        self.bank = bank


class SingularMatrixError(FairAggError, ArithmeticError):
    """A matrix that must be inverted is singular (or numerically so)."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition number estimate {condition:.3g})")
        self.condition = condition


class RankDeficientError(FairAggError, ArithmeticError):
    """A regression design does not have full column rank."""

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class BankIdentityError(FairAggError, ValueError):
    """A forecaster needs a bank index that was missing or out of range."""


class HypothesisViolation(FairAggError, ValueError):
    """A precondition of a closed form (e.g. a nonzero slope) does not hold."""


class DataError(FairAggError, ValueError):
    """Malformed, missing or empty data."""


class ConvergenceError(FairAggError, ArithmeticError):
    def __init__(self, message: str, sweep: int | None = None):
        super().__init__(message)
        self.sweep = sweep
