"""
Error types for the ShuffleGuard workbench.

Every failure the services raise derives from ShuffleGuardError so the CLI
can map it to an exit code in one place.
"""

from typing import Optional


class ShuffleGuardError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


class InvalidArgumentError(ShuffleGuardError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 2


class InvalidStateError(ShuffleGuardError, RuntimeError):
    """An object is not in the state an operation requires."""

    exit_code = 2


class ConfigError(ShuffleGuardError, ValueError):
    """An experiment manifest could not be parsed or validated."""

    exit_code = 2


class CorruptDatasetError(ShuffleGuardError, ValueError):
    """A dataset file is missing or has the wrong size."""

    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class CorruptRecordError(CorruptDatasetError):
    """A single dataset record holds an invalid value."""

    def __init__(self, message: str, path: Optional[str] = None, record_index: Optional[int] = None):
        super().__init__(message, path)
        self.record_index = record_index


class CheckpointError(ShuffleGuardError, RuntimeError):
    """A checkpoint is unreadable or does not match the requested key/grid."""

    exit_code = 4


def exit_code_for(error: BaseException) -> int:
    """Return the CLI exit code for an exception."""
    if isinstance(error, ShuffleGuardError):
        return error.exit_code
    return 1
