"""Exception types shared across the package.

Low-level math helpers raise builtin ValueError/IndexError; these classes
cover artifact-level failures that the CLI maps to distinct exit codes.
"""

from __future__ import annotations


class SJD2Error(Exception):
    """Base class for package-specific errors."""


class ConfigurationError(SJD2Error):
    """Invalid configuration value; message names the offending field."""


class ContractViolation(SJD2Error):
    """An operation was called with inputs violating its preconditions."""


class CapacityError(SJD2Error):
    """Sequence would not fit in the model context."""


class FormatError(SJD2Error):
    """Malformed checkpoint/corpus file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigMismatchError(SJD2Error):
    """Artifacts produced under different configurations were mixed."""


class TruncationError(SJD2Error):
    """Decode hit the forward-pass cap before emitting all tokens."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class TrainingDivergedError(SJD2Error):
    """Loss became non-finite during training."""

    def __init__(self, step: int, lr: float, grad_norm: float):
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})"
        )
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
