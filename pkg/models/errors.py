"""
Exception hierarchy shared by the engines and the command line.
"""
from typing import Optional


class CapAllocError(Exception):
    """Base class for every error raised by capalloc"""


class PortfolioValidationError(CapAllocError, ValueError):
    """Invalid portfolio input, reported with the offending unit and field"""

    def __init__(self, message: str, unit_id: Optional[str] = None, field: Optional[str] = None):
        self.detail = message
        self.unit_id = unit_id
        self.field = field
        location = []
        if unit_id is not None:
            location.append(f"unit '{unit_id}'")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class NumericalError(CapAllocError, ArithmeticError):
    """A computation could not produce a trustworthy number"""


class EnumerationCapError(NumericalError):
    """Exact enumeration requested above the configured unit cap"""

    def __init__(self, n: int, cap: int):
        self.n = n
        self.cap = cap
        super().__init__(
            f"exact Shapley enumeration is capped at n={cap} units (got n={n}); "
            f"use the Monte Carlo estimator (mc_shapley / --method mc) instead"
        )


class SingularScaleError(NumericalError):
    """The additivity scale factor beta has a vanishing denominator"""

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"{message} (perturbed component {index})"
        super().__init__(message)


class SingularSystemError(NumericalError):
    """A linear system of the optimizer is singular or too ill-conditioned"""


class OutputError(CapAllocError, OSError):
    """A report or manifest could not be written"""
