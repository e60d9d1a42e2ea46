"""Exception hierarchy for the pipeline.

Domain errors signal violated preconditions on otherwise well-formed
inputs; store errors cover serialization and database failures.  The CLI
maps ``PipelineError`` subclasses to exit code 3 and raw ``OSError`` to 4.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(PipelineError, ValueError):
    """A precondition on an operation's inputs was violated."""


class CrsMismatchError(DomainError):
    """Inputs that must share a coordinate reference system do not."""


class GridAlignmentError(DomainError):
    """A requested resolution does not divide the patch size exactly."""


class MissingIndicatorError(DomainError):
    """A mandatory quality indicator is absent from a tile report."""


class MissingBandError(DomainError):
    """A band required by the selected modality is not present."""


class NoLabeledPixelsError(DomainError):
    """Label extraction is undefined on a map with zero labeled pixels."""


class EmptyTagError(DomainError):
    """A split tag has no patches, so separation statistics are undefined."""


class StoreError(PipelineError):
    """Base class for tensor-store failures."""


class CodecError(StoreError):
    """Base class for record (de)serialization failures."""


class UnsupportedDtypeError(CodecError):
    """A tensor has a dtype outside the supported set."""


class MalformedHeaderError(CodecError):
    """The record header is not valid JSON or violates the schema."""


class OversizedHeaderError(CodecError):
    """The declared header length exceeds the configured cap."""


class OffsetOverlapError(CodecError):
    """Declared data offsets overlap, leave gaps, or miss payload bytes."""


class TruncatedPayloadError(CodecError):
    """The buffer ends before the bytes the header declares."""


class NotAStoreError(StoreError):
    """The path does not contain a readable store."""


class DuplicateKeyError(StoreError):
    """The same key was written twice into one store."""


class CapacityError(StoreError):
    """Writing would grow the store beyond its configured map size."""


class KeyNotFoundError(StoreError, KeyError):
    """The requested key is not in the store."""

    def __str__(self) -> str:  # KeyError quotes its args; keep the message plain
        return Exception.__str__(self)


class ContentMismatchError(StoreError):
    """Store content and the per-patch baseline disagree for a key."""
