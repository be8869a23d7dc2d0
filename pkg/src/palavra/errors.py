"""Exception hierarchy.

Configuration problems map to CLI exit code 2, data problems to exit code 3.
"""
from __future__ import annotations


class PalavraError(Exception):
    """Base class for all package errors."""


class ConfigError(PalavraError):
    pass


class DataError(PalavraError):
    pass


class PreconditionError(PalavraError, ValueError):
    pass


class InputError(DataError, ValueError):
    """Ill-shaped or unreadable input (dimension mismatch, bad record)."""


class NumericError(PalavraError, ArithmeticError):
    pass


class VocabularyError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ContextLengthError(DataError):
    pass


class AugmentationMiss(DataError):
    """The source type does not occur as a whole word in the caption."""


class NotDifferentiableError(PalavraError):
    pass


class TransportError(PalavraError):
    """The external encoder service could not be reached.

    ``attempts`` is the number of tries made and ``retry_after`` the
    suggested back-off in seconds before trying again.
    """

    def __init__(self, message: str, *, attempts: int, retry_after: float, url: str = ""):
        super().__init__(message)
        self.attempts = attempts
        self.retry_after = retry_after
        self.url = url
