"""Exception types shared across the package.

The CLI maps ``ConfigError`` to exit code 2 and every other ``DingoError``
to exit code 1.
"""


class DingoError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DingoError, ValueError):
    """Invalid configuration, problem spec or command-line input."""


class DataError(ConfigError):
    """A dataset file is missing or malformed."""


class DimensionError(DingoError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(DingoError, ValueError):
    """A vector contains NaN or Inf."""


class ProtocolViolation(DingoError):
    """A communication primitive was misused (e.g. an oversized payload)."""


class AssumptionViolation(DingoError):
    """H g = 0 while g != 0: the Hessian annihilates the gradient."""


class InvariantViolation(DingoError):
    """An internal solver or algorithm contract was broken."""


class LineSearchError(DingoError):
    """No step on the line-search grid satisfied the sufficient-decrease test."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
