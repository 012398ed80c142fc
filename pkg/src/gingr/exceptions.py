"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`GingrError`.
The CLI maps :class:`ValidationError` (and subclasses) to exit code 2 and
:class:`NumericalError` (and subclasses) to exit code 3.
"""


class GingrError(Exception):
    """Base class for all package errors."""


class ValidationError(GingrError, ValueError):
    """Input data or parameters violate a documented precondition."""


class FormatError(ValidationError):
    """A geometry or config file could not be parsed."""


class ConfigError(ValidationError):
    """A registration or CLI configuration is invalid."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class UnsupportedOperationError(GingrError, TypeError):
    """The operation is not defined for the given kind of input."""


class NumericalError(GingrError, ArithmeticError):
    """A numerical procedure failed (singular system, non-finite values)."""


class AlignmentError(NumericalError):
    """Closed-form alignment is undefined for a degenerate configuration."""


class DecimationError(ValidationError):
    pass


class KernelError(NumericalError):
    """A kernel matrix is not positive semi-definite within tolerance."""


class EmptyCorrespondenceError(NumericalError):
    """Every reference point was filtered out of the correspondence set."""

    def __init__(self, message, reasons=None):
        super().__init__(message)
        self.reasons = dict(reasons or {})
