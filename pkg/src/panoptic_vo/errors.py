"""Exception types shared across the package."""


class PanopticVOError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(PanopticVOError, ValueError):
    pass


class NonPositiveDepth(PanopticVOError, ValueError):
    pass


class NonPositiveInverseDepth(PanopticVOError, ValueError):
    pass


class SingularSystem(PanopticVOError, ArithmeticError):
    """Reduced normal equations could not be factorized even with damping."""


class LengthMismatch(PanopticVOError, ValueError):
    pass


class WindowTooLarge(PanopticVOError, ValueError):
    pass


class QueryOutOfBounds(PanopticVOError, IndexError):
    pass


class DegenerateGeometry(PanopticVOError, ValueError):
    """Scene configuration cannot be rendered (e.g. camera inside a primitive)."""


class DegenerateTrajectory(PanopticVOError, ValueError):
    pass


class InputInconsistency(PanopticVOError, ValueError):
    pass


class ConfigError(PanopticVOError, ValueError):
    """Scene config could not be parsed; message carries the offending line."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(PanopticVOError, ValueError):
    """Malformed array file or scene directory."""
