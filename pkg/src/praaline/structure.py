"""Corpus structure definitions.

The annotation structure (levels, attributes, inter-level relations) and the
metadata structure are the source of truth for the dynamically generated
database schema. All types here are frozen values: the ``add_*`` operations
return new structures and never mutate their input.

Relation semantics:

* ``Hierarchy``  - each child element carries a parent link; child spans lie
  within the parent span, the first child starts where the parent starts and
  the last child ends where the parent ends (phones under syllables).
* ``Containment`` - each child span lies within some parent span; no stored
  link and no exhaustive partition is required.
* ``Attachment`` - each child boundary coincides with some boundary on the
  parent level.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

from .errors import (
    CycleDetected,
    DuplicateAttribute,
    DuplicateLevel,
    DuplicateRelation,
    InvalidIdentifier,
    InvalidVocabulary,
    KindMismatch,
    ParseError,
    ReservedName,
    SchemaVersionUnsupported,
    SelfRelation,
    StructureError,
    UnknownLevel,
)


class MetadataObject(Enum):
    Communication = "Communication"
    Speaker = "Speaker"
    Recording = "Recording"
    Annotation = "Annotation"
    Participation = "Participation"


class Datatype(Enum):
    Text = "Text"
    Integer = "Integer"
    Real = "Real"
    Boolean = "Boolean"
    DateTime = "DateTime"


class LevelKind(Enum):
    Interval = "Interval"
    Point = "Point"


class RelationKind(Enum):
    Hierarchy = "Hierarchy"
    Containment = "Containment"
    Attachment = "Attachment"


# Attribute ids become SQL column names verbatim; level ids become table names
# after '-' -> '_' sanitization, so levels may additionally contain '-'.
ATTRIBUTE_ID_RE = re.compile(r"^[a-z][a-z0-9_]*$")
LEVEL_ID_RE = re.compile(r"^[a-z][a-z0-9_-]*$")
MAX_ID_LENGTH = 64

# Fixed key columns of every level table. Attribute ids may not collide with
# these under case folding ("tmin" is as unusable as "tMin").
RESERVED_LEVEL_COLUMNS = ("elementID", "annotationID", "speakerID", "tMin", "tMax", "label", "parentID")

# Fixed columns of the entity tables carrying metadata attributes.
RESERVED_ENTITY_COLUMNS = (
    "id", "communication_id", "speaker_id", "role",
    "filename", "duration_ns", "sample_rate_hz", "channels",
)

_RESERVED_FOLDED = {c.lower() for c in RESERVED_LEVEL_COLUMNS} | {c.lower() for c in RESERVED_ENTITY_COLUMNS}

# Annotation attributes exclude DateTime (metadata-only datatype).
ANNOTATION_DATATYPES = (Datatype.Text, Datatype.Integer, Datatype.Real, Datatype.Boolean)


@dataclass(frozen=True)
class MetadataAttribute:
    id: str
    name: str
    object: MetadataObject
    datatype: Datatype
    optional: bool = True


@dataclass(frozen=True)
class AnnotationAttributeDef:
    id: str
    name: str
    datatype: Datatype
    optional: bool = True
    vocabulary: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class AnnotationLevelDef:
    id: str
    name: str
    kind: LevelKind
    attributes: tuple[AnnotationAttributeDef, ...] = ()

    def attribute(self, attribute_id: str) -> Optional[AnnotationAttributeDef]:
        for a in self.attributes:
            if a.id == attribute_id:
                return a
        return None


@dataclass(frozen=True)
class LevelRelation:
    kind: RelationKind
    parent: str
    child: str


@dataclass(frozen=True)
class AnnotationStructure:
    levels: tuple[AnnotationLevelDef, ...] = ()
    relations: tuple[LevelRelation, ...] = ()
    metadata: tuple[MetadataAttribute, ...] = ()

    def level(self, level_id: str) -> Optional[AnnotationLevelDef]:
        for lv in self.levels:
            if lv.id == level_id:
                return lv
        return None

    def level_ids(self) -> list[str]:
        return [lv.id for lv in self.levels]

    def level_index(self, level_id: str) -> int:
        for i, lv in enumerate(self.levels):
            if lv.id == level_id:
                return i
        return -1

    def hierarchy_parent(self, child_id: str) -> Optional[str]:
        """The Hierarchy parent level of ``child_id`` (at most one)."""
        for rel in self.relations:
            if rel.kind is RelationKind.Hierarchy and rel.child == child_id:
                return rel.parent
        return None

    def hierarchy_children(self, parent_id: str) -> list[str]:
        return [r.child for r in self.relations
                if r.kind is RelationKind.Hierarchy and r.parent == parent_id]

    def metadata_for(self, obj: MetadataObject) -> list[MetadataAttribute]:
        return [m for m in self.metadata if m.object is obj]

    def metadata_attribute(self, obj: MetadataObject, attribute_id: str) -> Optional[MetadataAttribute]:
        for m in self.metadata:
            if m.object is obj and m.id == attribute_id:
                return m
        return None


@dataclass(frozen=True)
class Finding:
    code: str
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings


def sanitize_level_table(level_id: str) -> str:
    """Physical table name for a level ('-' is not SQL-friendly)."""
    return "lvl_" + level_id.replace("-", "_")


def _check_attribute_id(attribute_id: str) -> Optional[Finding]:
    if attribute_id.lower() in _RESERVED_FOLDED:
        return Finding("ReservedName", attribute_id, f"'{attribute_id}' is a reserved column name")
    if len(attribute_id) > MAX_ID_LENGTH or not ATTRIBUTE_ID_RE.match(attribute_id):
        return Finding("InvalidIdentifier", attribute_id,
                       f"'{attribute_id}' is not a valid identifier ([a-z][a-z0-9_]*, max {MAX_ID_LENGTH})")
    return None


def _check_level_id(level_id: str) -> Optional[Finding]:
    if len(level_id) > MAX_ID_LENGTH or not LEVEL_ID_RE.match(level_id):
        return Finding("InvalidIdentifier", level_id,
                       f"'{level_id}' is not a valid level id ([a-z][a-z0-9_-]*, max {MAX_ID_LENGTH})")
    return None


def _validate_annotation_attribute(level_id: str, attr: AnnotationAttributeDef, out: list[Finding]) -> None:
    path = f"{level_id}.{attr.id}"
    bad_id = _check_attribute_id(attr.id)
    if bad_id:
        out.append(replace(bad_id, path=path))
    if attr.datatype not in ANNOTATION_DATATYPES:
        out.append(Finding("KindMismatch", path, f"datatype {attr.datatype.value} not allowed on annotation attributes"))
    if attr.vocabulary is not None:
        if len(attr.vocabulary) == 0:
            out.append(Finding("InvalidVocabulary", path, "vocabulary present but empty"))
        if attr.datatype is not Datatype.Text:
            out.append(Finding("InvalidVocabulary", path, "vocabulary only permitted on Text attributes"))
        if len(set(attr.vocabulary)) != len(attr.vocabulary):
            out.append(Finding("InvalidVocabulary", path, "vocabulary items not unique"))


def _hierarchy_cycle(levels: list[str], edges: list[tuple[str, str]]) -> Optional[list[str]]:
    """Return one cycle (as a node list) in the Hierarchy digraph, or None."""
    adj: dict[str, list[str]] = {lv: [] for lv in levels}
    for parent, child in edges:
        if parent in adj:
            adj[parent].append(child)
    WHITE, GREY, BLACK = 0, 1, 2
    color = {lv: WHITE for lv in levels}
    stack: list[str] = []

    def visit(node: str) -> Optional[list[str]]:
        color[node] = GREY
        stack.append(node)
        for nxt in adj.get(node, ()):
            if nxt not in color:
                continue
            if color[nxt] == GREY:
                return stack[stack.index(nxt):] + [nxt]
            if color[nxt] == WHITE:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = BLACK
        return None

    for lv in levels:
        if color[lv] == WHITE:
            found = visit(lv)
            if found:
                return found
    return None


def validate_structure(structure: AnnotationStructure) -> ValidationReport:
    """Check every structure invariant; findings are data, not failures."""
    out: list[Finding] = []
    seen_levels: set[str] = set()
    seen_tables: dict[str, str] = {}
    for lv in structure.levels:
        bad = _check_level_id(lv.id)
        if bad:
            out.append(bad)
        if lv.id in seen_levels:
            out.append(Finding("DuplicateLevel", lv.id, f"level '{lv.id}' declared twice"))
        seen_levels.add(lv.id)
        table = sanitize_level_table(lv.id)
        if table in seen_tables and seen_tables[table] != lv.id:
            out.append(Finding("DuplicateLevel", lv.id,
                               f"levels '{seen_tables[table]}' and '{lv.id}' map to the same table '{table}'"))
        seen_tables.setdefault(table, lv.id)
        seen_attrs: set[str] = set()
        for attr in lv.attributes:
            if attr.id in seen_attrs:
                out.append(Finding("DuplicateAttribute", f"{lv.id}.{attr.id}",
                                   f"attribute '{attr.id}' declared twice on level '{lv.id}'"))
            seen_attrs.add(attr.id)
            _validate_annotation_attribute(lv.id, attr, out)

    seen_meta: set[tuple[MetadataObject, str]] = set()
    for meta in structure.metadata:
        path = f"metadata.{meta.object.value}.{meta.id}"
        bad_id = _check_attribute_id(meta.id)
        if bad_id:
            out.append(replace(bad_id, path=path))
        key = (meta.object, meta.id)
        if key in seen_meta:
            out.append(Finding("DuplicateAttribute", path,
                               f"metadata attribute '{meta.id}' declared twice for {meta.object.value}"))
        seen_meta.add(key)

    seen_rel: set[tuple[RelationKind, str, str]] = set()
    hierarchy_child_parents: dict[str, set[str]] = {}
    for rel in structure.relations:
        path = f"relation.{rel.kind.value}.{rel.parent}.{rel.child}"
        if rel.parent == rel.child:
            out.append(Finding("SelfRelation", path, "relation endpoints are the same level"))
            continue
        missing = False
        for endpoint in (rel.parent, rel.child):
            if structure.level(endpoint) is None:
                out.append(Finding("UnknownLevel", path, f"relation endpoint '{endpoint}' is not a declared level"))
                missing = True
        if missing:
            continue
        key = (rel.kind, rel.parent, rel.child)
        if key in seen_rel:
            out.append(Finding("DuplicateRelation", path, "relation declared twice"))
        seen_rel.add(key)
        if rel.kind in (RelationKind.Hierarchy, RelationKind.Containment):
            for endpoint in (rel.parent, rel.child):
                lv = structure.level(endpoint)
                if lv is not None and lv.kind is not LevelKind.Interval:
                    out.append(Finding("KindMismatch", path,
                                       f"{rel.kind.value} requires Interval levels; '{endpoint}' is {lv.kind.value}"))
        if rel.kind is RelationKind.Hierarchy:
            hierarchy_child_parents.setdefault(rel.child, set()).add(rel.parent)

    for child, parents in sorted(hierarchy_child_parents.items()):
        if len(parents) > 1:
            out.append(Finding("DuplicateRelation", f"relation.Hierarchy.*.{child}",
                               f"level '{child}' has multiple Hierarchy parents: {sorted(parents)}"))

    hedges = [(r.parent, r.child) for r in structure.relations
              if r.kind is RelationKind.Hierarchy and structure.level(r.parent) and structure.level(r.child)]
    cycle = _hierarchy_cycle(structure.level_ids(), hedges)
    if cycle:
        out.append(Finding("CycleDetected", "->".join(cycle), "Hierarchy relations form a cycle"))

    return ValidationReport(tuple(out))


_FINDING_ERRORS: dict[str, type[StructureError]] = {
    "InvalidIdentifier": InvalidIdentifier,
    "ReservedName": ReservedName,
    "DuplicateLevel": DuplicateLevel,
    "DuplicateAttribute": DuplicateAttribute,
    "UnknownLevel": UnknownLevel,
    "SelfRelation": SelfRelation,
    "KindMismatch": KindMismatch,
    "CycleDetected": CycleDetected,
    "DuplicateRelation": DuplicateRelation,
    "InvalidVocabulary": InvalidVocabulary,
}


def _raise_first(report: ValidationReport) -> None:
    if report.ok:
        return
    finding = report.findings[0]
    exc = _FINDING_ERRORS.get(finding.code, StructureError)
    raise exc(f"{finding.path}: {finding.message}")


def add_level(structure: AnnotationStructure, level: AnnotationLevelDef) -> AnnotationStructure:
    if structure.level(level.id) is not None:
        raise DuplicateLevel(f"level '{level.id}' already present")
    candidate = replace(structure, levels=structure.levels + (level,))
    _raise_first(validate_structure(candidate))
    return candidate


def add_attribute(structure: AnnotationStructure, level_id: str,
                  attribute: AnnotationAttributeDef) -> AnnotationStructure:
    level = structure.level(level_id)
    if level is None:
        raise UnknownLevel(f"no level '{level_id}'")
    if level.attribute(attribute.id) is not None:
        raise DuplicateAttribute(f"attribute '{attribute.id}' already present on level '{level_id}'")
    new_level = replace(level, attributes=level.attributes + (attribute,))
    candidate = replace(structure, levels=tuple(new_level if lv.id == level_id else lv
                                                for lv in structure.levels))
    _raise_first(validate_structure(candidate))
    return candidate


def add_relation(structure: AnnotationStructure, relation: LevelRelation) -> AnnotationStructure:
    candidate = replace(structure, relations=structure.relations + (relation,))
    _raise_first(validate_structure(candidate))
    return candidate


# --- XML persistence --------------------------------------------------------

STRUCTURE_FILE_VERSION = "1"


def write_structure(structure: AnnotationStructure) -> bytes:
    root = ET.Element("corpusStructure", version=STRUCTURE_FILE_VERSION)
    meta_el = ET.SubElement(root, "metadata")
    for m in structure.metadata:
        ET.SubElement(meta_el, "attribute", object=m.object.value, id=m.id, name=m.name,
                      datatype=m.datatype.value, optional=_bool_text(m.optional))
    levels_el = ET.SubElement(root, "levels")
    for lv in structure.levels:
        lv_el = ET.SubElement(levels_el, "level", id=lv.id, name=lv.name, kind=lv.kind.value)
        for a in lv.attributes:
            a_el = ET.SubElement(lv_el, "attribute", id=a.id, name=a.name,
                                 datatype=a.datatype.value, optional=_bool_text(a.optional))
            if a.vocabulary is not None:
                voc_el = ET.SubElement(a_el, "vocabulary")
                for item in a.vocabulary:
                    ET.SubElement(voc_el, "item").text = item
    rel_el = ET.SubElement(root, "relations")
    for r in structure.relations:
        ET.SubElement(rel_el, "relation", kind=r.kind.value, parent=r.parent, child=r.child)
    ET.indent(root)
    return ET.tostring(root, encoding="UTF-8", xml_declaration=True)


def _bool_text(value: bool) -> str:
    return "true" if value else "false"


def _parse_bool(text: str, what: str) -> bool:
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ParseError(f"invalid boolean '{text}' for {what}")


def _parse_enum(enum_cls, text: str, what: str):
    try:
        return enum_cls(text)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ParseError(f"unknown {what} '{text}' (expected one of: {allowed})") from None


def read_structure(data: bytes) -> AnnotationStructure:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"structure file is not UTF-8: {exc}") from exc
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, column = exc.position if exc.position else (None, None)
        raise ParseError(f"malformed XML: {exc.msg.split(':')[0] if exc.msg else exc}",
                         line=line, column=column) from exc
    if root.tag != "corpusStructure":
        raise ParseError(f"expected root <corpusStructure>, got <{root.tag}>")
    version = root.get("version")
    if version != STRUCTURE_FILE_VERSION:
        raise SchemaVersionUnsupported(f"structure file version '{version}' not supported")

    metadata: list[MetadataAttribute] = []
    for el in root.findall("./metadata/attribute"):
        metadata.append(MetadataAttribute(
            id=_require_attr(el, "id"),
            name=el.get("name", el.get("id", "")),
            object=_parse_enum(MetadataObject, _require_attr(el, "object"), "metadata object"),
            datatype=_parse_enum(Datatype, _require_attr(el, "datatype"), "datatype"),
            optional=_parse_bool(el.get("optional", "true"), "optional"),
        ))

    levels: list[AnnotationLevelDef] = []
    for lv_el in root.findall("./levels/level"):
        attrs: list[AnnotationAttributeDef] = []
        for a_el in lv_el.findall("attribute"):
            vocabulary = None
            voc_el = a_el.find("vocabulary")
            if voc_el is not None:
                vocabulary = tuple(item.text or "" for item in voc_el.findall("item"))
            attrs.append(AnnotationAttributeDef(
                id=_require_attr(a_el, "id"),
                name=a_el.get("name", a_el.get("id", "")),
                datatype=_parse_enum(Datatype, _require_attr(a_el, "datatype"), "datatype"),
                optional=_parse_bool(a_el.get("optional", "true"), "optional"),
                vocabulary=vocabulary,
            ))
        levels.append(AnnotationLevelDef(
            id=_require_attr(lv_el, "id"),
            name=lv_el.get("name", lv_el.get("id", "")),
            kind=_parse_enum(LevelKind, _require_attr(lv_el, "kind"), "level kind"),
            attributes=tuple(attrs),
        ))

    relations: list[LevelRelation] = []
    for r_el in root.findall("./relations/relation"):
        relations.append(LevelRelation(
            kind=_parse_enum(RelationKind, _require_attr(r_el, "kind"), "relation kind"),
            parent=_require_attr(r_el, "parent"),
            child=_require_attr(r_el, "child"),
        ))

    structure = AnnotationStructure(tuple(levels), tuple(relations), tuple(metadata))
    report = validate_structure(structure)
    if not report.ok:
        f = report.findings[0]
        raise ParseError(f"invalid structure: {f.path}: {f.message}")
    return structure


def _require_attr(el: ET.Element, name: str) -> str:
    value = el.get(name)
    if value is None:
        raise ParseError(f"<{el.tag}> missing required attribute '{name}'")
    return value
