"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not match the declared tensor-product structure."""


class NonHermitianError(ValueError):
    """An operator that must be Hermitian is not."""


class InvalidFamilyError(ValueError):
    """Projectors are not a complete orthogonal family."""


class NtcViolation(RuntimeError):
    """The non-transition condition fails on a window where it is required."""


class SplitRejected(RuntimeError):
    """A scheduled split cannot be performed (e.g. window shorter than tau_d)."""


class PathOverflow(RuntimeError):
    """The number of tree paths exceeds the configured cap."""


class ValueUndefined(RuntimeError):
    """A tree component straddles several subspaces of a family."""


class PremeasurementIncomplete(RuntimeError):
    """Pointer states did not reach their target subspaces."""
