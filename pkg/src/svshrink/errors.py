"""Exception types shared across the package."""


class SvshrinkError(Exception):
    """Base class for package-specific failures."""


class DecompositionError(SvshrinkError):
    """A matrix factorization (Cholesky, eigendecomposition) failed."""


class IllConditionedEncodingError(SvshrinkError):
    """An unfolding system is singular or numerically rank deficient."""

    def __init__(self, message, voxel_group=None):
        super().__init__(message)
        self.voxel_group = voxel_group


class ResourceLimitError(SvshrinkError):
    """A requested simulation exceeds the configured size cap."""


class NumericalFailureError(SvshrinkError):
    """An SVD or solver did not converge; carries the offending patch id."""

    def __init__(self, message, patch_id=None):
        super().__init__(message)
        self.patch_id = patch_id


class DomainError(SvshrinkError):
    """An evaluation point lies outside a transform's valid domain."""


class CoverageError(SvshrinkError):
    """A voxel received zero total assembly weight."""


class FormatError(SvshrinkError):
    """An on-disk container is malformed or inconsistent."""
