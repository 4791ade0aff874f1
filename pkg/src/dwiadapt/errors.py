"""Exception hierarchy shared across the package.

All domain errors derive from :class:`DwiAdaptError` so callers can catch
one base class at CLI boundaries while tests assert the precise subclass.
"""


class DwiAdaptError(Exception):
    """Base class for all dwiadapt domain errors."""


# --- stack / file format ---------------------------------------------------

class FormatError(DwiAdaptError):
    """A stack directory, manifest, or binary file is malformed."""


class ProtocolError(DwiAdaptError):
    """A b-value sequence violates protocol rules (ordering, b0, length)."""


class DimensionMismatch(DwiAdaptError):
    """Planes or masks of one stack disagree in shape."""


class EmptyFatMask(DwiAdaptError):
    """No fat pixels available to calibrate the background level."""


class MissingBValue(DwiAdaptError):
    """A requested b-value is not part of the protocol."""


class B0Required(DwiAdaptError):
    """An operation would remove the mandatory b=0 channel."""


# --- model fitting ---------------------------------------------------------

class UnderDetermined(DwiAdaptError):
    """Too few distinct b-values for the number of free fit parameters."""


class DegenerateInput(DwiAdaptError):
    """Fit input carries no usable signal (all-zero, or <2 distinct b)."""


class EmptyMask(DwiAdaptError):
    """A reduction over a mask was requested but the mask has no pixels."""


# --- phantom ---------------------------------------------------------------

class GeometryError(DwiAdaptError):
    """Lesion / fat regions cannot be placed inside the image."""


# --- classifier ------------------------------------------------------------

class ShapeMismatch(DwiAdaptError):
    """Network input does not match the architecture's expected shape."""


class SingleClassTraining(DwiAdaptError):
    """Training data does not contain both classes."""


class TooFewCases(DwiAdaptError):
    """Not enough cases to build the requested cross-validation plan."""


# --- reporting ---------------------------------------------------------------

class IoError(DwiAdaptError):
    """A report or results file could not be written or read."""


# --- evaluation ------------------------------------------------------------

class SingleClass(DwiAdaptError):
    """A scored set contains only one class; AUC is undefined."""


class LabelMismatch(DwiAdaptError):
    """Paired score sets do not share the same label vector."""


class InvalidP(DwiAdaptError):
    """A p-value outside [0, 1] or an alpha outside (0, 1) was supplied."""
