"""Exception types shared across the package."""


class DsplatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DsplatError, ValueError):
    pass


class DegenerateCovarianceError(DsplatError, ValueError):
    pass


class DegenerateRotationError(DsplatError, ValueError):
    pass


class NearSingularError(DsplatError, ValueError):
    pass


class StateError(DsplatError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class ShapeError(DsplatError, ValueError):
    pass


class NumericalAbort(DsplatError, FloatingPointError):
    """NaN or Inf detected in a loss or gradient."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(DsplatError, ValueError):
    pass


class FormatError(DsplatError, ValueError):
    """Malformed file on disk."""
