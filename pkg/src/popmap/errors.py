"""Exception types with stable, machine-parsable categories.

Every error carries a ``category`` (kebab-case string, stable across
versions) and an ``exit_code``. The CLI prints failures as a single
``<category>: <message>`` line on stderr and exits with the code, so
callers can branch on the category without parsing prose.

Exit codes: 2 usage, 3 data validation, 4 numeric failure.
"""


class PopmapError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"
    exit_code = 3


class UsageError(PopmapError):
    category = "usage"
    exit_code = 2


class ValidationError(PopmapError):
    """Generic data-validation failure (bad shapes, bad values)."""

    category = "data-validation"


class MissingFileError(PopmapError):
    category = "missing-file"


class GridFormatError(PopmapError):
    """Malformed PGRD file: bad magic, version, or dtype code."""

    category = "grid-format"


class TruncatedFileError(GridFormatError):
    """PGRD file shorter than its header claims."""

    category = "truncated-file"

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class DimensionMismatchError(PopmapError):
    category = "dimension-mismatch"


class UnknownLayerError(PopmapError):
    category = "unknown-layer"


class ManifestError(PopmapError):
    category = "manifest-format"


class CensusFormatError(PopmapError):
    """Malformed census CSV. Subclasses pin down the exact violation."""

    category = "census-format"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class DuplicateRegionError(CensusFormatError):
    category = "duplicate-region-id"


class NegativeCountError(CensusFormatError):
    category = "negative-count"


class MalformedRowError(CensusFormatError):
    category = "malformed-row"


class CensusInconsistencyError(PopmapError):
    """Hierarchical census violation: child sums disagree with parent."""

    category = "census-inconsistency"


class RegionCensusError(PopmapError):
    """A raster region id has no row in the associated census table."""

    category = "region-missing-from-census"


class CovariateMismatchError(PopmapError):
    """Checkpoint covariate names disagree with the dataset manifest."""

    category = "covariate-mismatch"


class NumericError(PopmapError):
    """Non-finite values where finite math was required."""

    category = "numeric-failure"
    exit_code = 4
