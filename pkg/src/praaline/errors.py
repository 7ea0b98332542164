"""Exception hierarchy for the corpus engine.

Every domain failure raises a subclass of :class:`PraalineError`; callers that
need machine-readable codes can use ``exc.code`` (the class name).
"""

from __future__ import annotations


class PraalineError(Exception):
    """Base class for all engine errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- structure definition -------------------------------------------------

class StructureError(PraalineError):
    pass


class InvalidIdentifier(StructureError):
    pass


class ReservedName(StructureError):
    pass


class DuplicateLevel(StructureError):
    pass


class DuplicateAttribute(StructureError):
    pass


class UnknownLevel(StructureError):
    pass


class UnknownAttribute(StructureError):
    pass


class SelfRelation(StructureError):
    pass


class KindMismatch(StructureError):
    pass


class CycleDetected(StructureError):
    pass


class DuplicateRelation(StructureError):
    pass


class InvalidVocabulary(StructureError):
    pass


class SchemaVersionUnsupported(StructureError):
    pass


class ParseError(PraalineError):
    """Malformed input file. Carries best-effort line/column information."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class UnsupportedEncoding(PraalineError):
    pass


# --- corpus model ----------------------------------------------------------

class ModelError(PraalineError):
    pass


class UnknownReference(ModelError):
    pass


class UnknownMetadataAttribute(ModelError):
    pass


class MetadataTypeMismatch(ModelError):
    pass


class OperatorTypeMismatch(ModelError):
    pass


# --- store -----------------------------------------------------------------

class StoreError(PraalineError):
    pass


class PathExists(StoreError):
    pass


class IoError(StoreError):
    pass


class DestructiveChangeRefused(StoreError):
    pass


class MigrationFailed(StoreError):
    pass


class ConstraintViolation(StoreError):
    pass


class CorruptCatalog(StoreError):
    pass


class CatalogMismatch(StoreError):
    pass


# --- interop ---------------------------------------------------------------

class MappingError(PraalineError):
    pass


# --- integrity -------------------------------------------------------------

class StaleViolations(PraalineError):
    pass


# --- pipeline --------------------------------------------------------------

class PipelineError(PraalineError):
    pass


class UnknownAnnotator(PipelineError):
    pass


class DependencyUnsatisfied(PipelineError):
    pass


class AnnotatorFailed(PipelineError):
    pass


class UnclassifiedPhone(PipelineError):
    pass


class NoNucleus(PipelineError):
    pass


class InvalidProfile(PipelineError):
    pass


# --- query -----------------------------------------------------------------

class QueryError(PraalineError):
    pass


class UnreachableSource(QueryError):
    pass


class MissingAggregate(QueryError):
    pass


class PredicateTypeMismatch(QueryError):
    pass


class NonNumericColumn(QueryError):
    pass


class InvalidPattern(QueryError):
    pass


class InvalidDatasetSpec(QueryError):
    pass


# --- cli -------------------------------------------------------------------

class UsageError(PraalineError):
    pass


class ConfigError(PraalineError):
    pass
