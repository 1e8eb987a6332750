class FedGMMError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(FedGMMError, ValueError):
    exit_code = 2


class DataError(FedGMMError, ValueError):
    exit_code = 3


class DataFormatError(DataError):
    """Malformed dataset or checkpoint file.  ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class NumericalError(FedGMMError, ArithmeticError):
    exit_code = 4


class FactorizationError(NumericalError):
    def __init__(self, message, component=None):
        self.component = component
        super().__init__(message)


class DegenerateRowError(NumericalError):
    """A responsibility row has no finite entry."""

    def __init__(self, message, sample=None):
        self.sample = sample
        super().__init__(message)


class StarvedComponentError(NumericalError):
    pass
