"""Exception hierarchy shared by every module of the package."""


class LabError(Exception):
    """Base class for all errors raised by lfrclab."""


class DimensionError(LabError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InputError(LabError, ValueError):
    """An argument has an invalid value (label out of range, empty batch, ...)."""


class ConfigError(LabError, ValueError):
    """A run configuration or ModelSpec is invalid."""


class FormatError(LabError, ValueError):
    """A file does not follow its expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleCheckpointError(LabError, ValueError):
    """A checkpoint's version, hash or parameter shapes do not match."""


class NumericalError(LabError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class UndefinedCorrelationError(LabError, ValueError):
    """Correlation requested for a constant series."""
