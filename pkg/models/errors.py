# models/errors.py
# Exception hierarchy shared by the numerical core, the controllers and the command line

from typing import Any, Optional


class HarmoniaError(Exception):
    """Base class. `exit_code` is what the command line returns for this error."""

    exit_code = 1


class FormatError(HarmoniaError):
    """Malformed or unreadable file (bad magic, version, truncated payload)."""

    exit_code = 2


class ShapeError(HarmoniaError):
    exit_code = 3


class LayoutError(ShapeError):
    """Tensor cannot be partitioned into groups along the requested axis."""


class TilingError(ShapeError):
    """Tile sizes do not divide the GEMM dimensions."""


class RegionError(ShapeError):
    """Token range outside the cache."""


class ConfigError(HarmoniaError):
    exit_code = 3


class InvalidArgumentError(ConfigError):
    pass


class InvalidScaleError(InvalidArgumentError):
    """Smoothing scale with a non-positive or non-finite entry."""


class InvalidValueError(HarmoniaError):
    """NaN / Inf where a finite value is required."""

    exit_code = 3


class EmptyInputError(InvalidValueError):
    pass


class InvariantViolationError(HarmoniaError):
    exit_code = 4


class CalibrationDivergedError(HarmoniaError):
    """Objective became non-finite. `best` holds the best iterate seen before that."""

    exit_code = 4

    def __init__(self, message: str, best: Optional[Any] = None):
        super().__init__(message)
        self.best = best
