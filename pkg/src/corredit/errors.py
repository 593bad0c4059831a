"""Exception types shared across the package."""


class CorrEditError(Exception):
    """Base class for all package errors."""


class ParameterError(CorrEditError, ValueError):
    pass


class ConfigError(CorrEditError, ValueError):
    pass


class ShapeError(CorrEditError, ValueError):
    pass


class ScheduleError(CorrEditError, ValueError):
    pass


class ConditionError(CorrEditError, ValueError):
    pass


class MetricError(CorrEditError, ValueError):
    pass


class IntegrityError(CorrEditError):
    """A persisted artifact failed validation."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DegradedCorrespondenceError(CorrEditError):
    """Too few valid correspondence cells to guide an edit."""

    def __init__(self, message: str, pair: tuple[int, int] | None = None,
                 valid_fraction: float | None = None):
        super().__init__(message)
        self.pair = pair
        self.valid_fraction = valid_fraction
