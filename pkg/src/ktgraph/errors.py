"""Shared exception types.

``UserInputError`` subclasses map to CLI exit code 1 (bad data, bad config,
bad flags); everything else that escapes is an internal error (exit code 2).
"""


class KTGraphError(Exception):
    """Base class for all package-specific errors."""


class UserInputError(KTGraphError):
    """The user supplied something invalid (file, row, flag, config)."""


class DataFormatError(UserInputError):
    """A malformed input row; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyGraphError(UserInputError):
    """No events survive ingestion filtering."""


class SnapshotError(UserInputError):
    """A graph snapshot file is corrupt or has the wrong version."""


class ConfigError(UserInputError):
    """Invalid or inconsistent run configuration."""


class CheckpointMismatchError(UserInputError):
    """Checkpoint config hash does not match the active config."""
