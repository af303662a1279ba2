"""Exception types shared across the package."""


class GlcError(Exception):
    """Base class for all library errors."""


class ConfigError(GlcError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(GlcError, ValueError):
    """Operands with incompatible dimensions."""


class DataFormatError(GlcError, ValueError):
    """Dataset files that violate the on-disk format."""


class NumericError(GlcError, ArithmeticError):
    """Non-finite or degenerate values where finite ones are required."""


class TrainingAborted(NumericError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, view=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.view = view
