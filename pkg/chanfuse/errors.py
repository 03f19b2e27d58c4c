import numpy as np


class ChanfuseError(Exception):
    """Base class for every error raised by chanfuse."""


class DataError(ChanfuseError, ValueError):
    """Input data or files are missing, malformed or inconsistent."""


class ManifestError(DataError):
    """A manifest record is invalid. The message carries `path:line:`."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class WaveFormatError(DataError):
    pass


class SegmentBoundsError(DataError):
    pass


class AmplitudeRangeError(DataError):
    pass


class ReferenceSignalError(DataError):
    pass


class ShapeError(ChanfuseError, ValueError):
    """A tensor does not satisfy the shape contract of an operation."""


class FusionCapacityError(ShapeError):
    pass


class NumericError(ChanfuseError, ArithmeticError):
    """Non-finite values or numerically infeasible requests."""


class InfeasibleLabelsError(NumericError):
    pass


class WPEFrameError(NumericError):
    pass


class COLAError(NumericError):
    pass


class SignalTooShortError(NumericError):
    pass


class ConfigError(ChanfuseError, ValueError):
    pass


class UsageError(ChanfuseError):
    pass


def ensure_finite(name: str, array) -> None:
    """Raise NumericError if `array` holds NaN or infinity."""
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name}: non-finite values detected")
