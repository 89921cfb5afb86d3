"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration, schema, provenance and
validation problems exit 1; container format and I/O problems exit 2.
"""


class TvMergeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(TvMergeError):
    """The checkpoint container is malformed (bad header, unknown dtype, ...)."""


class IntegrityError(TvMergeError):
    """Container metadata is internally inconsistent (sizes, offsets, duplicates)."""


class ValidationError(TvMergeError):
    """Values violate an invariant (non-finite entries, mismatched line counts)."""


class SchemaMismatchError(TvMergeError):
    """Two tensor collections disagree on names or shapes."""

    def __init__(self, message: str, *, only_in_a=(), only_in_b=(), shape_mismatched=()):
        super().__init__(message)
        self.only_in_a = tuple(only_in_a)
        self.only_in_b = tuple(only_in_b)
        self.shape_mismatched = tuple(shape_mismatched)


class ProvenanceError(TvMergeError):
    """A task vector was extracted against a different base checkpoint."""


class ConfigError(TvMergeError):
    """A merge or workbench configuration value is invalid."""


class UndefinedMetricError(TvMergeError):
    """The requested quantity is undefined for the given input (empty corpus, zero norm)."""


class DowncastOverflowWarning(UserWarning):
    """A finite float32 value saturated when stored in a narrower dtype."""
