"""Exception hierarchy shared by every wafervit module."""


class WaferVitError(Exception):
    """Base class for all library errors."""


class ShapeError(WaferVitError, ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericError(WaferVitError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""


class ContractError(WaferVitError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(WaferVitError, ValueError):
    """A binary file does not follow its declared format."""

    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class UndefinedMetricError(WaferVitError, ZeroDivisionError):
    """A metric was requested over zero scored decisions."""


class ConfigError(WaferVitError, ValueError):
    """Configuration values are inconsistent with each other or with the data."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss or gradient."""
