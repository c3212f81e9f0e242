"""Exception hierarchy shared by all qdcascade modules."""


class QDCascadeError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(QDCascadeError, ValueError):
    """A field or argument is out of its allowed range.

    ``field`` names the offending field so callers can report it.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigurationError(QDCascadeError):
    pass


class ModelDomainError(QDCascadeError, ValueError):
    pass


class FitError(QDCascadeError):
    pass


class NormalizationError(QDCascadeError):
    pass


class UndefinedFidelityError(QDCascadeError):
    pass


class ContractError(QDCascadeError):
    pass


class CalibrationError(QDCascadeError):
    pass


class FormatError(QDCascadeError):
    pass


class IntegrityError(QDCascadeError):
    """Tag data failed an integrity check (sortedness, truncation)."""

    def __init__(self, message, index=None, offset=None):
        self.index = index
        self.offset = offset
        super().__init__(message)
