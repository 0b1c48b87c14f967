"""Exception types shared across the package."""


class FactVqaError(Exception):
    """Base class for all package errors."""


class DimensionError(FactVqaError, ValueError):
    """Array shapes do not match what an operation requires."""


class ConfigurationError(FactVqaError, ValueError):
    """A config value, plugin name, or referenced resource is invalid."""


class InputError(FactVqaError, ValueError):
    """A runtime input (question, fact set, ...) violates a precondition."""


class FormatError(FactVqaError, ValueError):
    """A binary or JSON artifact on disk is malformed.

    Carries the byte offset at which decoding failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(FactVqaError, RuntimeError):
    """Training hit a non-recoverable numerical problem."""
