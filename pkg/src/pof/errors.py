"""Exception types shared across the package."""


class PofError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PofError, ValueError):
    """Invalid values: domain violations, broken invariants, bad dimensions."""


class DataFormatError(PofError, ValueError):
    """Malformed or truncated on-disk data (WAV, POFS, model JSON, config)."""


class UnsupportedFormatError(DataFormatError):
    """Well-formed input in a format this package does not handle."""


class NumericalError(PofError, RuntimeError):
    """Optimization or numerical failure (infeasible start, divergence)."""
