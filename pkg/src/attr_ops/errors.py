"""Exception hierarchy shared by every attr_ops module.

The CLI maps ValidationError to exit code 2 and NumericalError to exit code 3.
"""

from __future__ import annotations

from pathlib import Path


class AttrOpsError(Exception):
    """Base class for all attr_ops errors."""


class ValidationError(AttrOpsError, ValueError):
    """An input or precondition was violated."""


class DimensionError(ValidationError):
    """Operand shapes do not agree."""


class DatasetError(ValidationError):
    """Malformed or inconsistent dataset file.

    Args:
        message: What is wrong.
        path: File being read, if any.
        line: 1-based line number, if the problem is tied to one line.
    """

    def __init__(
        self, message: str, path: Path | str | None = None, line: int | None = None
    ):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class CheckpointError(ValidationError):
    """Checkpoint file has a bad header or does not match its declared shapes."""


class NumericalError(AttrOpsError, ArithmeticError):
    """A computation produced an unusable numerical result."""


class SingularMatrix(NumericalError):
    """Matrix inversion hit a pivot below tolerance.

    Args:
        message: Description of the failure.
        attribute: Name of the attribute whose operator collapsed, when known.
    """

    def __init__(self, message: str, attribute: str | None = None):
        self.attribute = attribute
        if attribute is not None:
            message = f"{message} (attribute operator '{attribute}')"
        super().__init__(message)


class NonFiniteError(NumericalError):
    """NaN or Inf found in a tensor.

    Args:
        tensor: Name of the offending tensor.
        context: Optional extra location info (e.g. "epoch 3, batch 7").
    """

    def __init__(self, tensor: str, context: str | None = None):
        self.tensor = tensor
        message = f"non-finite values in '{tensor}'"
        if context:
            message += f" at {context}"
        super().__init__(message)


class InvariantViolation(AttrOpsError, AssertionError):
    """An internal consistency check failed."""
