"""Exception types shared across the library."""


class GeometryError(ValueError):
    """Patch/image geometry is invalid (patch larger than image, bad stride...)."""


class OverlappingGridError(GeometryError):
    """Operation requires non-overlapping patches but stride < patch size."""


class EmptyDatasetError(ValueError):
    """A dataset-level statistic was requested over zero samples."""


class InfeasibleClusterCountError(ValueError):
    """More clusters requested than distinct values available."""


class DegenerateBatchError(ValueError):
    """Batch cannot support the requested loss (needs P >= 2 identities, K >= 2 instances)."""


class DegenerateDatasetError(ValueError):
    """Dataset cannot supply the requested P x K sampling."""


class ShapeMismatchError(ValueError):
    """Array dimensions disagree between inputs that must align."""


class EmptyInputError(ValueError):
    """An operation that needs at least one element received none."""


class EmptyEvaluationError(ValueError):
    """Every query was skipped; no metric can be reported."""


class StoreFormatError(ValueError):
    """Feature-store file is malformed (magic, version, or size formula)."""


class ManifestError(ValueError):
    """Dataset manifest is malformed; message carries the offending line number."""
