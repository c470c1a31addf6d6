"""Exception hierarchy shared by every module."""


class CSRCFLError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CSRCFLError, ValueError):
    """Inputs violate a documented precondition."""


class SchemaError(ValidationError):
    """A required column or field is missing."""


class ParseError(ValidationError):
    """A cell could not be parsed as a finite number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CapacityError(CSRCFLError):
    """The exact coalition solver was asked for an instance above its size limit."""


class ProtocolError(CSRCFLError):
    """A federated round aborted; ``phase`` names where it failed."""

    def __init__(self, message, phase):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
