"""Exception hierarchy shared by every package; each class knows its exit code."""

from config import EXIT_CODES


class MoeMilError(Exception):
    """Base class for all errors raised on purpose by this project."""

    exit_code = EXIT_CODES["unexpected"]


class ContractError(MoeMilError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = EXIT_CODES["contract"]


class ConfigError(ContractError):
    """Invalid or unknown configuration values."""


class DimensionError(ContractError):
    """Shapes or widths that do not fit together."""


class IndexRangeError(ContractError, IndexError):
    """An index, label or class id outside its valid range."""


class StructureError(ContractError):
    """Records that do not form a valid patch hierarchy."""


class GraphError(ContractError):
    """Misuse of the gradient tape (non-scalar loss, repeated backward)."""


class NumericError(MoeMilError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = EXIT_CODES["numeric"]


class DataIOError(MoeMilError, OSError):
    """A file could not be read or written."""

    exit_code = EXIT_CODES["io"]


class BagFormatError(MoeMilError):
    """Malformed MBAG content."""

    exit_code = EXIT_CODES["io"]

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(MoeMilError):
    """Malformed MCKP content."""

    exit_code = EXIT_CODES["io"]


class VersionMismatchError(CheckpointFormatError):
    """A file or config was written by an unsupported format version."""
