"""
Exception hierarchy for skelseg.

Every error raised on purpose by the engine derives from SkelsegError, so the
command line can map families of failures onto exit codes.
"""

from typing import Optional


class SkelsegError(Exception):
    """Base class for all engine errors"""


class ShapeError(SkelsegError, ValueError):
    """Tensor or array dimensions do not agree"""


class ConfigError(SkelsegError, ValueError):
    """Invalid configuration value or unknown configuration key"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DataValidationError(SkelsegError, ValueError):
    """A data invariant was violated; the message names the field"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class ParseError(DataValidationError):
    """A file could not be parsed"""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None,
                 line: Optional[int] = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.path = path
        self.offset = offset
        self.line = line


class MissingPredictionError(DataValidationError):
    """A labeled sequence has no prediction"""

    def __init__(self, sequence_id: str):
        super().__init__(f"missing prediction for sequence '{sequence_id}'", field=sequence_id)
        self.sequence_id = sequence_id


class CheckpointError(SkelsegError):
    """Checkpoint could not be written or restored"""


class ChecksumError(CheckpointError):
    """Checkpoint section is truncated or its digest does not match"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version"""


class NumericError(SkelsegError, ArithmeticError):
    """Non-finite values appeared in a computation"""
