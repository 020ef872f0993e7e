"""Exception hierarchy shared across the package."""


class BatchExpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BatchExpError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(BatchExpError, ValueError):
    """A configuration or environment spec is inconsistent.

    ``path`` names the offending field (e.g. ``environment.k``) when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class EnvStateError(BatchExpError, RuntimeError):
    """An environment was used out of order (e.g. stepped after terminating)."""


class ContractError(BatchExpError, ValueError):
    """A scoring function received a record it cannot score."""


class NumericError(BatchExpError, ArithmeticError):
    """A numerical routine failed after all fallbacks."""


class IngestionError(BatchExpError, ValueError):
    """A data file is malformed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
