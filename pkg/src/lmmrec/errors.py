"""Exception hierarchy.

Every error carries the name of the module that raised it so the command
line front end can report where a failure originated and pick an exit code.
"""

from __future__ import annotations


class LmmError(Exception):
    module = "lmmrec"
    exit_code = 1


class FormulaError(LmmError, ValueError):
    """Malformed or invalid model formula.

    ``position`` is the 0-based character offset of the offending token, or
    ``None`` for errors that are not tied to one place in the text.
    """

    module = "formula"
    exit_code = 1

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class DesignError(LmmError, ValueError):
    module = "design"
    exit_code = 2


class DataError(LmmError, ValueError):
    """Problems with input files or observation tables."""

    module = "ingest"
    exit_code = 2

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class NumericalError(LmmError, ArithmeticError):
    """Degenerate data or a factorization failure in the mixed model solver."""

    module = "reml"
    exit_code = 3


class ConvergenceError(NumericalError):
    module = "reml"
    exit_code = 3


class StatsError(LmmError, ValueError):
    module = "stats"
    exit_code = 1


class UsageError(LmmError, ValueError):
    module = "cli"
    exit_code = 1
