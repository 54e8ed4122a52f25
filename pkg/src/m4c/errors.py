"""Exception types shared across the package."""


class M4CError(Exception):
    """Base class for all package errors."""


class ValidationError(M4CError, ValueError):
    """Raised when an input violates a documented constraint."""


class DimensionError(ValidationError):
    """Raised when tensor or feature shapes are incompatible."""


class ParseError(ValidationError):
    """Raised for malformed input files; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(M4CError, RuntimeError):
    """Raised when training cannot continue (e.g. a non-finite loss)."""
