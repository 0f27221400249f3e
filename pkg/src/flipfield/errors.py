"""Exception hierarchy shared across the package.

CLI mapping: UsageError -> exit 1, DataError -> exit 2, NumericFailure -> exit 3.
"""
from __future__ import annotations


class FlipFieldError(Exception):
    """Base class for all package errors."""


class UsageError(FlipFieldError):
    """Bad arguments or configuration supplied by the caller."""


class GeometryError(FlipFieldError):
    pass


class FewerThanFourPoints(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


class OriginInput(GeometryError):
    pass


class DegenerateLookAt(GeometryError):
    pass


class PixelOutOfRange(FlipFieldError):
    pass


class LengthMismatch(FlipFieldError):
    pass


class NonpositiveVariance(FlipFieldError):
    pass


class DimensionMismatch(FlipFieldError):
    pass


class ImageTooSmall(FlipFieldError):
    pass


class UnknownMode(UsageError):
    pass


class DataError(FlipFieldError):
    """Problems with datasets or files on disk."""


class MissingFile(DataError):
    pass


class MalformedTransforms(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class WrongObservationCount(DataError):
    pass


class AlreadyFlipped(DataError):
    pass


class EmptySplit(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericFailure(FlipFieldError):
    """Non-finite loss or gradients during optimization."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
