"""Exception hierarchy shared by all modules."""


class IonThermoError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(IonThermoError, ValueError):
    """An argument lies outside the accepted domain."""


class QMismatchError(InvalidInputError):
    """Sideband count of an input does not match the model or dataset."""


class ResourceLimitError(IonThermoError):
    """A computation would exceed a configured size cap."""


class FormatError(IonThermoError):
    """A file does not follow the declared binary or text layout."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class FitFailureError(IonThermoError):
    """An iterative fit did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
