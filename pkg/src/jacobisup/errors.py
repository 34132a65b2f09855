"""Exception hierarchy shared by all modules.

Each class carries a CLI exit code so the command-line front end can map
library failures onto its documented exit statuses.
"""
from __future__ import annotations


class JacobisupError(Exception):
    exit_code = 2


class DomainError(JacobisupError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 4


class PrecisionExhausted(JacobisupError):
    """The certified error bound could not be met at the largest precision."""

    exit_code = 3

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class TruncationError(JacobisupError):
    """A truncated sum could not certify its tail below the requested budget."""

    exit_code = 3

    def __init__(self, message: str, achieved: float | None = None):
        super().__init__(message)
        self.achieved = achieved


class ContractError(JacobisupError):
    """A numerical contract (rank, definiteness, fit residual) was violated."""

    exit_code = 2
