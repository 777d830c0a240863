"""Shared exception types."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or hit a singular coefficient."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, corrupt, or of an unsupported version."""
