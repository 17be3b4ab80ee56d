"""Exception hierarchy shared by all shiftmatch modules."""


class ShiftMatchError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ShiftMatchError, ValueError):
    """Operand shapes do not compose."""


class SpecError(ShiftMatchError, ValueError):
    """Inputs violate a structural contract (layout, site, method mismatch)."""


class NumericError(ShiftMatchError, ArithmeticError):
    """A numerical routine failed or produced unusable output."""


class NotPSDError(NumericError):
    """Matrix has an eigenvalue below the PSD tolerance."""


class IllConditionedError(NumericError):
    """Matrix is too close to singular for the requested operation."""


class InsufficientDataError(ShiftMatchError, ValueError):
    """Not enough examples accumulated to finalize statistics."""


class FormatError(ShiftMatchError, ValueError):
    """A serialized file is malformed or truncated."""


class ConfigError(ShiftMatchError, ValueError):
    """An experiment configuration is invalid or incomplete."""


class TrainingError(NumericError):
    """Optimization diverged (NaN/Inf loss)."""
