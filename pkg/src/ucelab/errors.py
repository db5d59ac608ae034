"""Exception hierarchy shared by every ucelab module."""


class UceLabError(Exception):
    """Base class for all library errors."""


class DimensionError(UceLabError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class NumericError(UceLabError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class DomainError(UceLabError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class PreconditionError(UceLabError, ValueError):
    """An operation was called in a state where it is undefined."""


class ConfigError(UceLabError, ValueError):
    """A configuration value is invalid."""


class DataError(UceLabError, ValueError):
    """Dataset content is invalid (e.g. out-of-range class ids)."""


class FormatError(DataError):
    """A file does not follow the expected binary layout."""


class UndefinedMetricError(UceLabError, ValueError):
    """A metric was requested over an empty population."""


class DivergedRunError(UceLabError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, iteration=None, log=None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration
        self.log = log
