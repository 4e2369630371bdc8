"""Exception taxonomy shared by the library and the CLI exit-code mapping."""
from __future__ import annotations


class SplatError(Exception):
    """Base class for library errors."""


class FormatError(SplatError):
    """A file on disk does not match its documented format (CLI exit 3)."""


class SceneFormatError(FormatError):
    pass


class VolumeFormatError(FormatError):
    pass


class ImageFormatError(FormatError):
    pass


class ParamsFormatError(FormatError):
    pass


class InvalidPrimitiveError(SplatError, ValueError):
    """A Gaussian primitive violates its invariants (e.g. singular covariance)."""


class NumericFailure(SplatError):
    """A computation produced non-finite values (CLI exit 4)."""


class CheckFailure(SplatError):
    """A self-check (gradcheck, verification command) did not pass (CLI exit 5)."""
