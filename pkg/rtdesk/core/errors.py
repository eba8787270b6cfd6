"""
Exception types raised across rtdesk.

All of them subclass a builtin so callers can catch either the precise
type or the broad ``ValueError``/``RuntimeError`` family.
"""
from typing import Optional, Sequence


class DimensionError(ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ActionRangeError(ValueError):
    """An action value or token lies outside its dimension's range."""

    def __init__(self, dimension: str, value, lower, upper):
        super().__init__(
            f"Action dimension '{dimension}' value {value} outside [{lower}, {upper}]"
        )
        self.dimension = dimension
        self.value = value


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Configuration is invalid or inconsistent with the requested operation."""


class DatasetFormatError(ValueError):
    """A dataset directory or episode chunk is malformed."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupted, or of another version."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class GenerationError(RuntimeError):
    """The scripted expert could not produce a successful episode."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, dump_path: Optional[str] = None):
        message = f"Non-finite loss at step {step}"
        if dump_path:
            message += f"; offending batch written to {dump_path}"
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path
