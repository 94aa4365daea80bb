"""Exception hierarchy; each family maps to a CLI exit code."""


class CameraError(Exception):
    exit_code = 1


class ConfigError(CameraError, ValueError):
    """Bad configuration or usage."""

    exit_code = 1


class DataError(CameraError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class FormatError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class EmbeddingServiceError(DataError):
    pass


class NumericalError(CameraError, ArithmeticError):
    """Non-finite values during training or gradient computation."""

    exit_code = 3
