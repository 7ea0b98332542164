"""In-memory corpus object model.

A corpus is organised in communications and speakers; speakers participate in
communications with roles, communications own recordings and annotations.
Time-aligned content lives in tiers of annotation elements. The corpus value
is single-writer: ``upsert_entity`` mutates it in place and returns it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Optional, Union

from .errors import (
    MetadataTypeMismatch,
    OperatorTypeMismatch,
    UnknownLevel,
    UnknownMetadataAttribute,
    UnknownReference,
)
from .structure import AnnotationStructure, Datatype, LevelKind, MetadataObject


@dataclass
class Communication:
    id: str
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class Speaker:
    id: str
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class Recording:
    id: str
    communication_id: str
    filename: str = ""
    duration_ns: int = 0
    sample_rate_hz: int = 16000
    channels: int = 1
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class Participation:
    communication_id: str
    speaker_id: str
    role: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass
class Annotation:
    id: str
    communication_id: str
    metadata: dict[str, Any] = field(default_factory=dict)


Entity = Union[Communication, Speaker, Recording, Participation, Annotation]


@dataclass
class AnnotationElement:
    element_id: int
    t_min: int
    t_max: int
    label: str = ""
    attributes: dict[str, Any] = field(default_factory=dict)
    parent_id: Optional[int] = None


@dataclass
class Tier:
    communication_id: str
    annotation_id: Optional[str]
    speaker_id: Optional[str]
    level_id: str
    elements: list[AnnotationElement] = field(default_factory=list)

    def sort(self) -> None:
        self.elements.sort(key=lambda e: (e.t_min, e.element_id))

    def insert(self, element: AnnotationElement) -> None:
        """Insert keeping the (t_min, element_id) ordering."""
        self.elements.append(element)
        self.sort()

    def by_id(self, element_id: int) -> Optional[AnnotationElement]:
        for e in self.elements:
            if e.element_id == element_id:
                return e
        return None


# --- typed metadata values ---------------------------------------------------

_PY_TYPES = {
    Datatype.Text: str,
    Datatype.Integer: int,
    Datatype.Real: (int, float),
    Datatype.Boolean: bool,
    Datatype.DateTime: datetime,
}


def value_matches(datatype: Datatype, value: Any) -> bool:
    if value is None:
        return True
    if datatype is Datatype.Integer or datatype is Datatype.Real:
        if isinstance(value, bool):
            return False
    return isinstance(value, _PY_TYPES[datatype])


def check_metadata(structure: AnnotationStructure, obj: MetadataObject,
                   metadata: dict[str, Any]) -> None:
    for key, value in metadata.items():
        attr = structure.metadata_attribute(obj, key)
        if attr is None:
            raise UnknownMetadataAttribute(f"no {obj.value} metadata attribute '{key}'")
        if not value_matches(attr.datatype, value):
            raise MetadataTypeMismatch(
                f"{obj.value}.{key} expects {attr.datatype.value}, got {type(value).__name__} {value!r}")


class Corpus:
    """Working set of corpus entities, validated against a structure."""

    def __init__(self, structure: AnnotationStructure):
        self.structure = structure
        self.communications: dict[str, Communication] = {}
        self.speakers: dict[str, Speaker] = {}
        self.recordings: dict[str, Recording] = {}
        self.participations: dict[tuple[str, str], Participation] = {}
        self.annotations: dict[str, Annotation] = {}

    def recordings_of(self, communication_id: str) -> list[Recording]:
        return sorted((r for r in self.recordings.values() if r.communication_id == communication_id),
                      key=lambda r: r.id)

    def annotations_of(self, communication_id: str) -> list[Annotation]:
        return sorted((a for a in self.annotations.values() if a.communication_id == communication_id),
                      key=lambda a: a.id)

    def speakers_of(self, communication_id: str) -> list[Speaker]:
        out = []
        for (cid, sid), _p in sorted(self.participations.items()):
            if cid == communication_id and sid in self.speakers:
                out.append(self.speakers[sid])
        return out


def upsert_entity(corpus: Corpus, entity: Entity) -> Corpus:
    """Insert or replace an entity by id, preserving referential integrity."""
    s = corpus.structure
    if isinstance(entity, Communication):
        check_metadata(s, MetadataObject.Communication, entity.metadata)
        corpus.communications[entity.id] = entity
    elif isinstance(entity, Speaker):
        check_metadata(s, MetadataObject.Speaker, entity.metadata)
        corpus.speakers[entity.id] = entity
    elif isinstance(entity, Recording):
        if entity.communication_id not in corpus.communications:
            raise UnknownReference(f"recording '{entity.id}' references unknown communication "
                                   f"'{entity.communication_id}'")
        if entity.duration_ns <= 0:
            raise UnknownReference(f"recording '{entity.id}' must have positive duration")
        check_metadata(s, MetadataObject.Recording, entity.metadata)
        corpus.recordings[entity.id] = entity
    elif isinstance(entity, Participation):
        if entity.communication_id not in corpus.communications:
            raise UnknownReference(f"participation references unknown communication '{entity.communication_id}'")
        if entity.speaker_id not in corpus.speakers:
            raise UnknownReference(f"participation references unknown speaker '{entity.speaker_id}'")
        check_metadata(s, MetadataObject.Participation, entity.metadata)
        corpus.participations[(entity.communication_id, entity.speaker_id)] = entity
    elif isinstance(entity, Annotation):
        if entity.communication_id not in corpus.communications:
            raise UnknownReference(f"annotation '{entity.id}' references unknown communication "
                                   f"'{entity.communication_id}'")
        check_metadata(s, MetadataObject.Annotation, entity.metadata)
        corpus.annotations[entity.id] = entity
    else:
        raise TypeError(f"not a corpus entity: {type(entity).__name__}")
    return corpus


# --- sub-corpus selection -----------------------------------------------------

OPERATORS = ("=", "!=", "<", "<=", ">", ">=", "contains")
_ORDERED_TYPES = (Datatype.Integer, Datatype.Real, Datatype.DateTime, Datatype.Text)


@dataclass(frozen=True)
class MetadataPredicate:
    attribute_id: str
    op: str
    value: Any


def _resolve_predicate(structure: AnnotationStructure, pred: MetadataPredicate):
    """Predicates name Communication metadata first, then linked Speaker metadata."""
    for obj in (MetadataObject.Communication, MetadataObject.Speaker):
        attr = structure.metadata_attribute(obj, pred.attribute_id)
        if attr is not None:
            return obj, attr
    raise UnknownMetadataAttribute(
        f"no Communication or Speaker metadata attribute '{pred.attribute_id}'")


def _check_predicate_types(attr, pred: MetadataPredicate) -> None:
    if pred.op not in OPERATORS:
        raise OperatorTypeMismatch(f"unknown operator '{pred.op}'")
    if pred.op == "contains":
        if attr.datatype is not Datatype.Text:
            raise OperatorTypeMismatch(f"'contains' requires a Text attribute, '{attr.id}' is {attr.datatype.value}")
        if not isinstance(pred.value, str):
            raise OperatorTypeMismatch(f"'contains' requires a string value, got {type(pred.value).__name__}")
        return
    if pred.op in ("<", "<=", ">", ">="):
        if attr.datatype not in _ORDERED_TYPES:
            raise OperatorTypeMismatch(f"ordered comparison not defined for {attr.datatype.value}")
    if not value_matches(attr.datatype, pred.value) or pred.value is None:
        raise OperatorTypeMismatch(
            f"'{attr.id}' expects {attr.datatype.value} values, got {type(pred.value).__name__} {pred.value!r}")


def _apply_op(op: str, actual: Any, wanted: Any) -> bool:
    if actual is None:
        return False
    if op == "=":
        return actual == wanted
    if op == "!=":
        return actual != wanted
    if op == "contains":
        return wanted in actual
    if op == "<":
        return actual < wanted
    if op == "<=":
        return actual <= wanted
    if op == ">":
        return actual > wanted
    return actual >= wanted


def select_subcorpus(corpus: Corpus, predicates: Iterable[MetadataPredicate]) -> list[str]:
    """Communication ids satisfying the conjunction of predicates, sorted.

    A Speaker predicate holds for a communication when at least one
    participating speaker satisfies it.
    """
    preds = list(predicates)
    resolved = []
    for p in preds:
        obj, attr = _resolve_predicate(corpus.structure, p)
        _check_predicate_types(attr, p)
        resolved.append((obj, attr, p))

    selected = []
    for comm_id in sorted(corpus.communications):
        comm = corpus.communications[comm_id]
        ok = True
        for obj, attr, p in resolved:
            if obj is MetadataObject.Communication:
                if not _apply_op(p.op, comm.metadata.get(p.attribute_id), p.value):
                    ok = False
                    break
            else:
                speakers = corpus.speakers_of(comm_id)
                if not any(_apply_op(p.op, spk.metadata.get(p.attribute_id), p.value) for spk in speakers):
                    ok = False
                    break
        if ok:
            selected.append(comm_id)
    return selected


# --- aggregate statistics -----------------------------------------------------

@dataclass
class StatsReport:
    communication_count: int
    recording_count: int
    total_duration_ns: int
    element_counts: dict[str, int]

    def to_json(self) -> str:
        return json.dumps({
            "communications": self.communication_count,
            "recordings": self.recording_count,
            "total_duration_ns": self.total_duration_ns,
            "element_counts": self.element_counts,
        }, ensure_ascii=False, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["communications", self.communication_count])
        writer.writerow(["recordings", self.recording_count])
        writer.writerow(["total_duration_ns", self.total_duration_ns])
        for level_id, count in self.element_counts.items():
            writer.writerow([f"elements[{level_id}]", count])
        return buf.getvalue()


def corpus_stats(corpus: Corpus, handle, level_ids: Optional[Iterable[str]] = None,
                 predicates: Iterable[MetadataPredicate] = ()) -> StatsReport:
    """Aggregate counts over the (sub-)corpus; element counts come from the store."""
    from . import store  # local import to avoid a cycle

    if level_ids is None:
        level_ids = corpus.structure.level_ids()
    level_ids = list(level_ids)
    for lid in level_ids:
        if corpus.structure.level(lid) is None:
            raise UnknownLevel(f"no level '{lid}'")

    comm_ids = select_subcorpus(corpus, predicates)
    comm_set = set(comm_ids)
    recordings = [r for r in corpus.recordings.values() if r.communication_id in comm_set]
    counts = {lid: store.count_elements(handle, lid, comm_ids) for lid in level_ids}
    return StatsReport(
        communication_count=len(comm_ids),
        recording_count=len(recordings),
        total_duration_ns=sum(r.duration_ns for r in recordings),
        element_counts=counts,
    )
