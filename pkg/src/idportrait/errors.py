"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, I/O errors exit 3,
numerical errors exit 4.
"""


class IdPortraitError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(IdPortraitError):
    """A component was wired together with incompatible settings."""


class ShapeError(IdPortraitError, ValueError):
    """Tensor arguments have mismatched shapes."""


class RangeError(IdPortraitError, ValueError):
    """A scalar argument (typically a timestep) is out of its valid range."""


class NumericalError(IdPortraitError, ArithmeticError):
    """A computation would be numerically unstable or produced non-finite values."""


class MissingOracleError(IdPortraitError, KeyError):
    """Oracle-mode lookup on an image that carries no provenance metadata."""
