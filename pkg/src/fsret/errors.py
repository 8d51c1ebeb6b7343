"""Exception hierarchy shared by every fsret module.

Each error carries a stable machine-readable ``code`` so the CLI and the
HTTP service can surface the same identifier the originating module raised.
"""


class FsretError(Exception):
    """Base class for all domain errors raised by this package."""

    code = "FSRET_ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__doc__)


# --- vector primitives ------------------------------------------------------

class ZeroVector(FsretError):
    """Vector has no component above the zero threshold."""

    code = "ZERO_VECTOR"


class DimensionMismatch(FsretError):
    """Operands do not share one embedding dimension."""

    code = "DIMENSION_MISMATCH"


# --- embedding file format --------------------------------------------------

class BadMagic(FsretError):
    """File does not start with the expected magic bytes."""

    code = "BAD_MAGIC"


class VersionUnsupported(FsretError):
    """File declares a format version this reader does not support."""

    code = "VERSION_UNSUPPORTED"


class TruncatedFile(FsretError):
    """File ended before the declared payload was complete."""

    code = "TRUNCATED_FILE"


class DuplicateId(FsretError):
    """Two records share one id."""

    code = "DUPLICATE_ID"


# --- indexing ---------------------------------------------------------------

class EmptyCorpus(FsretError):
    """Operation requires at least one record."""

    code = "EMPTY_CORPUS"


class InvalidClusterCount(FsretError):
    """Cluster count outside [1, record count]."""

    code = "INVALID_CLUSTER_COUNT"


# --- benchmark data model ---------------------------------------------------

class SchemaError(FsretError):
    """Structured input does not match the documented schema."""

    code = "SCHEMA_ERROR"


class UnknownId(FsretError):
    """Referenced id does not exist in the corpus."""

    code = "UNKNOWN_ID"


class OverlapViolation(FsretError):
    """Id sets that must be disjoint overlap."""

    code = "OVERLAP_VIOLATION"


class InsufficientExamples(FsretError):
    """Not enough labeled examples to satisfy the operation's contract."""

    code = "INSUFFICIENT_EXAMPLES"


class MissingImagePath(FsretError):
    """Image copy requested but no path metadata exists for an id."""

    code = "MISSING_IMAGE_PATH"


# --- evaluation -------------------------------------------------------------

class EmptyPositives(FsretError):
    """Query has no positives to score against."""

    code = "EMPTY_POSITIVES"


class UnknownQuery(FsretError):
    """Run references a query id absent from the manifest."""

    code = "UNKNOWN_QUERY"


class FsrLeak(FsretError):
    """A ranking contains an id reserved for the few-shot reference corpus."""

    code = "FSR_LEAK"


# --- training ---------------------------------------------------------------

class DistributionInvalid(FsretError):
    """Probability vector has a non-positive component or does not sum to 1."""

    code = "DISTRIBUTION_INVALID"


class NonFiniteLoss(FsretError):
    """Training loss became NaN or infinite."""

    code = "NON_FINITE_LOSS"


class UnknownTargetId(FsretError):
    """Triplet target id absent from the frozen external corpus."""

    code = "UNKNOWN_TARGET_ID"


class MissingEmbedding(FsretError):
    """Item lacks a required text or image embedding."""

    code = "MISSING_EMBEDDING"


class EmptyPool(FsretError):
    """Reference candidate pool is empty."""

    code = "EMPTY_POOL"


# --- service ----------------------------------------------------------------

class NoEmbedding(FsretError):
    """Query text has no precomputed embedding in the loaded text corpus."""

    code = "NO_EMBEDDING"
