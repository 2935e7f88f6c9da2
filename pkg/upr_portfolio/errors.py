"""Exception hierarchy shared by every module, plus the CLI exit-code contract."""

from __future__ import annotations

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class UprError(Exception):
    """Base class for errors raised by upr_portfolio."""


class ValidationError(UprError, ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class IngestError(ValidationError):
    """Raised when a price or return file cannot be turned into a clean panel."""


class ConfigError(ValidationError):
    """Raised when a run configuration or flag value is invalid."""


class NumericalError(UprError, ArithmeticError):
    """Raised when a computation cannot produce a finite, meaningful result."""


class DegenerateMeanError(NumericalError):
    """Raised when the sample mean vector is proportional to the ones vector.

    The target-return constraint is then redundant with the budget constraint and the
    two-multiplier projection is undefined.
    """


class DivergenceError(NumericalError):
    """Raised when an objective or gradient turns non-finite during descent."""


class DegenerateSeriesError(NumericalError):
    """Raised for zero-variance return series or a non-positive SR-test variance."""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    raise exc
