"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not match what an operation requires."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(ValueError):
    """A serialized file is malformed; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training diverged; carries epoch/batch indices in the message."""
