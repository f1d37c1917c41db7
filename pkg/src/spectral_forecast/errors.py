"""Exception types shared across the package."""


class ForecastError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ForecastError, ValueError):
    pass


class NumericError(ForecastError, ArithmeticError):
    pass


class IngestError(ForecastError):
    pass


class UndefinedMetric(ForecastError, ValueError):
    pass


class TrainingDiverged(NumericError):
    pass


class VersionMismatch(ForecastError):
    pass
