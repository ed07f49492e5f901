"""Exception hierarchy for ssa_nowcast.

Every error carries the process exit code the CLI reports for it.
"""


class SSANowcastError(Exception):
    """Base class for all engine errors."""
    exit_code = 1


class ConfigurationError(SSANowcastError):
    """Invalid configuration: divisibility, unknown values, bad flags."""
    exit_code = 2


class DimensionError(SSANowcastError):
    """Tensor shapes that do not fit an operation."""
    exit_code = 2


class UsageError(SSANowcastError):
    """API misuse, e.g. running a backward kernel without its context."""
    exit_code = 2


class DataError(SSANowcastError):
    """Problems with datasets, archives or checkpoints on disk."""
    exit_code = 3


class ArchiveError(DataError):
    """Malformed or truncated binary container."""

    def __init__(self, message: str, offset: int = -1):
        if offset >= 0:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(DataError):
    """Container header disagrees with its payload."""


class CheckpointError(DataError):
    """Checkpoint cannot be decoded or does not fit the model."""


class ShapeMismatchError(CheckpointError):
    """A stored tensor has a different shape than the model expects."""

    def __init__(self, name: str, expected, found):
        super().__init__(
            f"Shape mismatch for tensor '{name}': model expects {tuple(expected)}, "
            f"checkpoint holds {tuple(found)}"
        )
        self.name = name


class NumericError(SSANowcastError):
    """Non-finite values during training."""
    exit_code = 4
