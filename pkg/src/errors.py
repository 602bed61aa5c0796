"""Exception hierarchy shared by every stage, plus the CLI exit codes they map to."""

from typing import Optional


class GenieError(Exception):
    exit_code = 1


class ConfigError(GenieError):
    exit_code = 2


class ShapeError(GenieError, ValueError):
    exit_code = 2


class NumericError(GenieError):
    """NaN/Inf, division by zero or a degenerate statistic.

    ``step`` and ``batch`` locate the failure inside an optimization loop.
    """

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None, batch: Optional[int] = None):
        self.detail = message
        self.step = step
        self.batch = batch
        where = []
        if batch is not None:
            where.append(f"batch {batch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)


class GraphError(GenieError):
    exit_code = 3


class CheckpointError(GenieError):
    exit_code = 4
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class UnknownVersionError(CheckpointError):
    code = "unknown_version"


class TruncatedPayloadError(CheckpointError):
    code = "truncated"


class OverlappingOffsetsError(CheckpointError):
    code = "overlapping_offsets"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, GenieError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 4
    return 1
