"""Exception types shared across the package."""


class DistillError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DistillError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(DistillError):
    """A computation produced NaN/inf or otherwise diverged.

    When raised from the meta-optimizer, ``snapshot`` carries the last
    finite state so callers can salvage a partial run.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ContractError(DistillError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class SingularMatrixError(DistillError):
    """A matrix required to be well-conditioned is numerically singular."""


class InsufficientDataError(DistillError):
    """A dataset does not contain enough examples for the request."""


class EmptyClassError(DistillError):
    """A per-class computation found no examples of the required class."""


class LayoutMismatchError(DistillError):
    """Serialized parameters do not match the expected model layout."""


class IdxFormatError(DistillError):
    """Base class for IDX file parsing failures."""


class BadMagic(IdxFormatError):
    """An IDX file starts with an unexpected magic number."""


class CountMismatch(IdxFormatError):
    """Image and label files disagree on the number of examples."""


class TruncatedFile(IdxFormatError):
    """An IDX file ends before the declared payload is complete."""
