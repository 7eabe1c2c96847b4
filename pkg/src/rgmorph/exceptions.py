"""Exception hierarchy shared by every rgmorph module."""


class RgmorphError(Exception):
    """Base class for all package errors."""


class ShapeError(RgmorphError, ValueError):
    """Array dimensions do not agree with what an operation expects."""


class NumericError(RgmorphError, FloatingPointError):
    """A computation produced or received non-finite values, or a matrix
    that should be positive definite is not."""


class ConfigurationError(RgmorphError, ValueError):
    """Invalid hyperparameter or structural setting."""


class ValidationError(RgmorphError, ValueError):
    """Invalid input data (labels, sizes, ranges)."""


class FormatError(RgmorphError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
