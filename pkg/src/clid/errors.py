"""Exception types raised across the package."""


class ClidError(Exception):
    """Base class for all package errors."""


class ConfigError(ClidError, ValueError):
    """Invalid configuration or hyper-parameter."""


class ShapeError(ClidError, ValueError):
    """Array dimensions do not conform."""


class DataError(ClidError, ValueError):
    """Input data is malformed or out of domain."""


class ParseError(DataError):
    """A line of ranking data could not be parsed."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TrainingDivergence(ClidError, FloatingPointError):
    """A loss or gradient became non-finite during training."""


class UndefinedMetric(ClidError, ValueError):
    """A metric has no defined value for the given input."""
