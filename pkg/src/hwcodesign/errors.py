"""Exception hierarchy shared by every module."""

from __future__ import annotations

from typing import Any


class CodesignError(Exception):
    """Base class for all package errors."""


class ParseError(CodesignError, ValueError):
    """Input text could not be parsed. ``line`` and ``column`` are 1-based when known."""

    def __init__(self, message: str, source: str = "<input>", line: int | None = None,
                 column: int | None = None):
        where = source
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line
        self.column = column


class ValidationError(CodesignError, ValueError):
    """An input violates a documented invariant."""


class InsufficientDataError(ValidationError):
    """Too few or too homogeneous training records for a fit."""


class ValidityError(CodesignError):
    """A closed-form solution's validity condition does not hold for the given inputs."""


class InfeasibleError(CodesignError):
    """No architecture in the search box satisfies the constraints."""


class ConvergenceError(CodesignError):
    """An iterative solver stalled. ``best`` holds the best iterate found."""

    def __init__(self, message: str, best: Any = None, iterates: list | None = None):
        super().__init__(message)
        self.best = best
        self.iterates = iterates or []
