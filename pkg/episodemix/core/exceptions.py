"""Error types raised by the library.

Every error carries a ``status_code`` (the CLI exit code) and a human readable
``detail``, the same pair the command layer needs to report a failure.
"""
from typing import Optional

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_NOT_CONVERGED = 3


class EpisodeMixError(Exception):
    status_code: int = EXIT_FAILURE

    def __init__(self, detail: str, status_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if status_code is not None:
            self.status_code = status_code


class OutOfSupport(EpisodeMixError, ValueError):
    """Value outside a truncated distribution's support."""


class EmptySequence(EpisodeMixError, ValueError):
    pass


class ZeroWeight(EpisodeMixError, ValueError):
    """No responsibility mass reached a state; the caller keeps its parameters."""


class UnknownToken(EpisodeMixError, KeyError):
    def __init__(self, stream: str, token, line: Optional[int] = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}unknown token {token!r} in stream '{stream}'")
        self.stream = stream
        self.token = token
        self.line = line

    def __str__(self):
        return self.detail


class EmptyDataset(EpisodeMixError, ValueError):
    pass


class ParseError(EpisodeMixError, ValueError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SchemaViolation(EpisodeMixError, ValueError):
    pass


class IoError(EpisodeMixError):
    pass


class DivisionByZeroMass(EpisodeMixError, ZeroDivisionError):
    pass


class NonConvergent(EpisodeMixError, RuntimeError):
    pass
