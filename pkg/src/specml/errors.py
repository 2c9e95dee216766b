"""Exception types raised across the package.

Grouped loosely by subsystem; all inherit from :class:`SpecmlError` so
callers can catch package failures with a single except clause. Types that
signal caller mistakes additionally inherit ``ValueError``.
"""


class SpecmlError(Exception):
    """Base class for all package-specific failures."""


# --- data container / file format ---------------------------------------

class BadMagic(SpecmlError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(SpecmlError):
    """File ended before the payload announced by its header."""


class NonFiniteValue(SpecmlError):
    """A NaN or infinity was found where only finite values are admitted."""

    def __init__(self, message, sample=None, band=None):
        super().__init__(message)
        self.sample = sample
        self.band = band


class InconsistentShape(SpecmlError):
    """Header fields and payload disagree, or shapes do not line up."""


class InvalidConfig(SpecmlError, ValueError):
    """A configuration value violates its documented range."""


class EmptySet(SpecmlError):
    """An operation that needs samples received none."""


# --- statistics / linear algebra -----------------------------------------

class EmptyBucket(SpecmlError):
    """The selected split bucket holds too few pixels to fit on."""


class DegenerateBand(SpecmlError):
    """A band has zero variance and strict standardization was requested."""

    def __init__(self, message, band=None):
        super().__init__(message)
        self.band = band


class DimensionMismatch(SpecmlError, ValueError):
    """Vector or matrix dimensions do not match the fitted model."""


class NotSymmetric(SpecmlError, ValueError):
    """Matrix handed to the symmetric eigensolver is not symmetric."""


class NoConvergence(SpecmlError):
    """Iterative solver hit its sweep cap before reaching tolerance."""


class InvalidRule(SpecmlError, ValueError):
    """Component selection rule is malformed or inapplicable."""


# --- losses / network -----------------------------------------------------

class NonPositiveTemperature(SpecmlError, ValueError):
    """Softmax temperature must be strictly positive."""


class ShapeMismatch(SpecmlError, ValueError):
    """Array arguments have incompatible shapes."""


class StaleCache(SpecmlError):
    """Backward pass received a cache from a different forward pass."""


# --- benchmarking ----------------------------------------------------------

class IncomparableArchitectures(SpecmlError, ValueError):
    """The two networks differ beyond their input dimension."""
