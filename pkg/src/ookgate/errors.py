"""Exception hierarchy.

Two families matter to callers (and to the CLI's exit codes):
``ValidationError`` for bad values reaching a computation, and ``InputError``
for unreadable or malformed input files.
"""


class OokgateError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(OokgateError, ValueError):
    pass


class InputError(OokgateError):
    pass


# vecstore
class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class RaggedDimensions(ValidationError):
    pass


class InvalidK(ValidationError):
    pass


# statistics
class EmptyNeighborList(ValidationError):
    pass


class RankOutOfRange(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class MetaKindRequiresCalibration(ValidationError):
    pass


# calibration / drift / metrics
class EmptySample(ValidationError):
    pass


class EmptyCalibrationSet(ValidationError):
    pass


class InvalidAlpha(ValidationError):
    pass


class InvalidPValue(ValidationError):
    pass


class NeighborListTooShort(ValidationError):
    pass


class CalibrationFileError(InputError):
    pass


class InvariantViolation(CalibrationFileError):
    pass


class UnsupportedVersion(CalibrationFileError):
    pass


class ChecksumMismatch(CalibrationFileError):
    pass


# ingest
class InvalidChunking(ValidationError):
    pass


class EmbeddingFileError(InputError):
    pass


class BadMagic(EmbeddingFileError):
    pass


class InvalidHeader(EmbeddingFileError):
    pass


class TruncatedPayload(EmbeddingFileError):
    pass


class IdCountMismatch(EmbeddingFileError):
    pass


class EndpointError(OokgateError):
    pass


class DimensionDrift(EndpointError):
    pass


class InconsistentAnswerKey(ValidationError):
    pass


class NoSyntheticQueries(OokgateError):
    pass
