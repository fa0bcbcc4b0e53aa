"""Exception types shared across the package."""


class ASILfDError(Exception):
    """Base class for all package errors."""


class ConfigError(ASILfDError, ValueError):
    """Invalid configuration, flags or arguments."""


class ShapeError(ASILfDError, ValueError):
    """Array dimensions do not match what an operation expects."""


class ValidationError(ASILfDError, ValueError):
    """Data violates a structural invariant (e.g. a broken trajectory)."""


class NumericError(ASILfDError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message: str, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step

    def __str__(self):
        msg = super().__str__()
        if self.layer is not None:
            msg += f" (layer {self.layer})"
        if self.step is not None:
            msg += f" (step {self.step})"
        return msg


class BufferNotReady(ASILfDError):
    """The replay buffers cannot yet supply a batch; skip this update."""
