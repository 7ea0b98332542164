"""Embedded single-file relational store.

The schema is generated from the annotation structure: each level is a table
(``lvl_<id>``, '-' sanitized to '_') whose fixed key columns are elementID,
annotationID, speakerID, tMin, tMax, label and - when the level is the child
of a Hierarchy relation - parentID; each annotation attribute is a column.
Metadata attributes become columns on the entity tables through the same
mechanism. The structure itself is recoverable from the sys_structure_*
catalog tables, so external tools can issue plain SQL against corpus data.

Concurrency contract: one ReadWrite handle per database file per process, any
number of ReadOnly handles; writes are short per-tier transactions.
"""

from __future__ import annotations

import json
import os
import sqlite3
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Iterable, Optional

from .errors import (
    CatalogMismatch,
    ConstraintViolation,
    CorruptCatalog,
    DestructiveChangeRefused,
    IoError,
    MigrationFailed,
    PathExists,
    UnknownLevel,
)
from .model import (
    Annotation,
    AnnotationElement,
    Communication,
    Corpus,
    Participation,
    Recording,
    Speaker,
    Tier,
    check_metadata,
    value_matches,
)
from .structure import (
    AnnotationAttributeDef,
    AnnotationLevelDef,
    AnnotationStructure,
    Datatype,
    LevelKind,
    LevelRelation,
    MetadataAttribute,
    MetadataObject,
    RelationKind,
    sanitize_level_table,
    validate_structure,
)


class Mode(Enum):
    ReadOnly = "ro"
    ReadWrite = "rw"


SYSTEM_TABLES = (
    "communication", "speaker", "recording", "participation", "annotation",
    "sys_structure_levels", "sys_structure_attributes",
    "sys_structure_relations", "sys_structure_metadata",
)

_ENTITY_TABLE_FOR = {
    MetadataObject.Communication: "communication",
    MetadataObject.Speaker: "speaker",
    MetadataObject.Recording: "recording",
    MetadataObject.Annotation: "annotation",
    MetadataObject.Participation: "participation",
}

_ENTITY_FIXED_COLUMNS = {
    "communication": [("id", "TEXT")],
    "speaker": [("id", "TEXT")],
    "recording": [("id", "TEXT"), ("communication_id", "TEXT"), ("filename", "TEXT"),
                  ("duration_ns", "INTEGER"), ("sample_rate_hz", "INTEGER"), ("channels", "INTEGER")],
    "participation": [("communication_id", "TEXT"), ("speaker_id", "TEXT"), ("role", "TEXT")],
    "annotation": [("id", "TEXT"), ("communication_id", "TEXT")],
}

_SQL_TYPE = {
    Datatype.Text: "TEXT",
    Datatype.Integer: "INTEGER",
    Datatype.Real: "REAL",
    Datatype.Boolean: "INTEGER",
    Datatype.DateTime: "TEXT",
}

_CATALOG_DDL = """
CREATE TABLE sys_structure_levels (
    pos        INTEGER NOT NULL,
    level_id   TEXT PRIMARY KEY,
    name       TEXT NOT NULL,
    kind       TEXT NOT NULL
);
CREATE TABLE sys_structure_attributes (
    level_id     TEXT NOT NULL,
    pos          INTEGER NOT NULL,
    attribute_id TEXT NOT NULL,
    name         TEXT NOT NULL,
    datatype     TEXT NOT NULL,
    optional     INTEGER NOT NULL,
    vocabulary   TEXT,
    PRIMARY KEY (level_id, attribute_id)
);
CREATE TABLE sys_structure_relations (
    kind   TEXT NOT NULL,
    parent TEXT NOT NULL,
    child  TEXT NOT NULL,
    PRIMARY KEY (kind, parent, child)
);
CREATE TABLE sys_structure_metadata (
    object       TEXT NOT NULL,
    pos          INTEGER NOT NULL,
    attribute_id TEXT NOT NULL,
    name         TEXT NOT NULL,
    datatype     TEXT NOT NULL,
    optional     INTEGER NOT NULL,
    PRIMARY KEY (object, attribute_id)
);
"""

_write_lock = threading.Lock()
_open_writers: set[str] = set()


def qident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


@dataclass
class StoreHandle:
    path: str
    mode: Mode
    conn: sqlite3.Connection
    structure: AnnotationStructure
    _closed: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.conn.close()
        if self.mode is Mode.ReadWrite:
            with _write_lock:
                _open_writers.discard(self.path)

    def __enter__(self) -> "StoreHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _Tx:
    """Explicit transaction; sqlite3 autocommit is disabled at connect."""

    def __init__(self, handle: StoreHandle):
        self.handle = handle

    def __enter__(self) -> sqlite3.Connection:
        self.handle._lock.acquire()
        self.handle.conn.execute("BEGIN")
        return self.handle.conn

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            if exc_type is None:
                self.handle.conn.execute("COMMIT")
            else:
                self.handle.conn.execute("ROLLBACK")
        finally:
            self.handle._lock.release()


def _connect(path: str, mode: Mode) -> sqlite3.Connection:
    uri = f"file:{path}?mode={'ro' if mode is Mode.ReadOnly else 'rw'}"
    try:
        conn = sqlite3.connect(uri, uri=True, isolation_level=None, check_same_thread=False)
    except sqlite3.OperationalError as exc:
        raise IoError(f"cannot open database {path}: {exc}") from exc
    conn.execute("PRAGMA foreign_keys = OFF")
    return conn


def _register_writer(path: str) -> None:
    real = os.path.realpath(path)
    with _write_lock:
        if real in _open_writers:
            raise IoError(f"a ReadWrite handle for {path} is already open in this process")
        _open_writers.add(real)


def _level_columns(structure: AnnotationStructure, level: AnnotationLevelDef) -> list[tuple[str, str]]:
    cols = [("elementID", "INTEGER"), ("annotationID", "TEXT"), ("speakerID", "TEXT"),
            ("tMin", "INTEGER"), ("tMax", "INTEGER"), ("label", "TEXT")]
    if structure.hierarchy_parent(level.id) is not None:
        cols.append(("parentID", "INTEGER"))
    cols.extend((a.id, _SQL_TYPE[a.datatype]) for a in level.attributes)
    return cols


def plan_schema(structure: AnnotationStructure) -> dict[str, Any]:
    """Physical layout implied by a structure: tables and their column sets."""
    level_tables = {}
    for level in structure.levels:
        level_tables[sanitize_level_table(level.id)] = {
            "level_id": level.id,
            "columns": _level_columns(structure, level),
        }
    entity_tables = {}
    for obj, table in _ENTITY_TABLE_FOR.items():
        cols = list(_ENTITY_FIXED_COLUMNS[table])
        cols.extend((m.id, _SQL_TYPE[m.datatype]) for m in structure.metadata_for(obj))
        entity_tables[table] = cols
    return {"levels": level_tables, "entities": entity_tables}


def _level_table_ddl(structure: AnnotationStructure, level: AnnotationLevelDef) -> str:
    cols = _level_columns(structure, level)
    col_sql = ",\n    ".join(f"{qident(name)} {sqltype}" for name, sqltype in cols)
    return (f"CREATE TABLE {qident(sanitize_level_table(level.id))} (\n    {col_sql},\n"
            f"    PRIMARY KEY ({qident('annotationID')}, {qident('speakerID')}, {qident('elementID')})\n)")


def _entity_table_ddl(table: str, structure: AnnotationStructure) -> str:
    plan = plan_schema(structure)["entities"][table]
    col_sql = ",\n    ".join(f"{qident(name)} {sqltype}" for name, sqltype in plan)
    if table == "participation":
        pk = 'PRIMARY KEY ("communication_id", "speaker_id")'
    else:
        pk = 'PRIMARY KEY ("id")'
    return f"CREATE TABLE {qident(table)} (\n    {col_sql},\n    {pk}\n)"


def _write_catalog(conn: sqlite3.Connection, structure: AnnotationStructure) -> None:
    for table in ("sys_structure_levels", "sys_structure_attributes",
                  "sys_structure_relations", "sys_structure_metadata"):
        conn.execute(f"DELETE FROM {qident(table)}")
    for pos, level in enumerate(structure.levels):
        conn.execute("INSERT INTO sys_structure_levels (pos, level_id, name, kind) VALUES (?,?,?,?)",
                     (pos, level.id, level.name, level.kind.value))
        for apos, attr in enumerate(level.attributes):
            conn.execute(
                "INSERT INTO sys_structure_attributes "
                "(level_id, pos, attribute_id, name, datatype, optional, vocabulary) VALUES (?,?,?,?,?,?,?)",
                (level.id, apos, attr.id, attr.name, attr.datatype.value, int(attr.optional),
                 json.dumps(list(attr.vocabulary), ensure_ascii=False) if attr.vocabulary is not None else None))
    for rel in structure.relations:
        conn.execute("INSERT INTO sys_structure_relations (kind, parent, child) VALUES (?,?,?)",
                     (rel.kind.value, rel.parent, rel.child))
    for pos, meta in enumerate(structure.metadata):
        conn.execute(
            "INSERT INTO sys_structure_metadata (object, pos, attribute_id, name, datatype, optional) "
            "VALUES (?,?,?,?,?,?)",
            (meta.object.value, pos, meta.id, meta.name, meta.datatype.value, int(meta.optional)))


def _read_catalog(conn: sqlite3.Connection) -> AnnotationStructure:
    try:
        levels = []
        for level_id, name, kind in conn.execute(
                "SELECT level_id, name, kind FROM sys_structure_levels ORDER BY pos"):
            attrs = []
            for attribute_id, aname, datatype, optional, vocabulary in conn.execute(
                    "SELECT attribute_id, name, datatype, optional, vocabulary "
                    "FROM sys_structure_attributes WHERE level_id = ? ORDER BY pos", (level_id,)):
                attrs.append(AnnotationAttributeDef(
                    id=attribute_id, name=aname, datatype=Datatype(datatype),
                    optional=bool(optional),
                    vocabulary=tuple(json.loads(vocabulary)) if vocabulary is not None else None))
            levels.append(AnnotationLevelDef(id=level_id, name=name, kind=LevelKind(kind),
                                             attributes=tuple(attrs)))
        relations = [LevelRelation(RelationKind(kind), parent, child)
                     for kind, parent, child in conn.execute(
                         "SELECT kind, parent, child FROM sys_structure_relations "
                         "ORDER BY kind, parent, child")]
        metadata = [MetadataAttribute(id=attribute_id, name=name, object=MetadataObject(obj),
                                      datatype=Datatype(datatype), optional=bool(optional))
                    for obj, attribute_id, name, datatype, optional in conn.execute(
                        "SELECT object, attribute_id, name, datatype, optional "
                        "FROM sys_structure_metadata ORDER BY object, pos")]
    except (sqlite3.Error, ValueError, json.JSONDecodeError) as exc:
        raise CorruptCatalog(f"cannot read structure catalog: {exc}") from exc
    return AnnotationStructure(tuple(levels), tuple(relations), tuple(metadata))


def create_database(path: str, structure: AnnotationStructure) -> StoreHandle:
    """Create a new corpus database; the path must not exist (or be empty)."""
    report = validate_structure(structure)
    if not report.ok:
        f = report.findings[0]
        raise ConstraintViolation(f"invalid structure: {f.path}: {f.message}")
    if os.path.exists(path) and os.path.getsize(path) > 0:
        raise PathExists(f"refusing to overwrite existing file {path}")
    _register_writer(path)
    try:
        conn = sqlite3.connect(path, isolation_level=None, check_same_thread=False)
    except sqlite3.OperationalError as exc:
        with _write_lock:
            _open_writers.discard(os.path.realpath(path))
        raise IoError(f"cannot create database {path}: {exc}") from exc
    try:
        conn.execute("BEGIN")
        conn.executescript("")  # no-op; keeps executescript out of the transaction path
        for stmt in _CATALOG_DDL.strip().split(";\n"):
            if stmt.strip():
                conn.execute(stmt)
        for table in ("communication", "speaker", "recording", "participation", "annotation"):
            conn.execute(_entity_table_ddl(table, structure))
        for level in structure.levels:
            conn.execute(_level_table_ddl(structure, level))
        _write_catalog(conn, structure)
        conn.execute("COMMIT")
    except sqlite3.Error as exc:
        conn.execute("ROLLBACK")
        conn.close()
        with _write_lock:
            _open_writers.discard(os.path.realpath(path))
        raise IoError(f"database creation failed: {exc}") from exc
    return StoreHandle(path=os.path.realpath(path), mode=Mode.ReadWrite, conn=conn, structure=structure)


def open_store(path: str, mode: Mode = Mode.ReadWrite) -> StoreHandle:
    if not os.path.exists(path):
        raise IoError(f"no database at {path}")
    real = os.path.realpath(path)
    if mode is Mode.ReadWrite:
        _register_writer(real)
    try:
        conn = _connect(real, mode)
        structure = _read_catalog(conn)
    except Exception:
        if mode is Mode.ReadWrite:
            with _write_lock:
                _open_writers.discard(real)
        raise
    return StoreHandle(path=real, mode=mode, conn=conn, structure=structure)


def _require_writable(handle: StoreHandle) -> None:
    if handle.mode is not Mode.ReadWrite:
        raise IoError("handle is read-only")


# --- schema introspection and migration --------------------------------------

def _physical_columns(conn: sqlite3.Connection, table: str) -> list[tuple[str, str]]:
    return [(row[1], row[2]) for row in conn.execute(f"PRAGMA table_info({qident(table)})")]


def _physical_tables(conn: sqlite3.Connection) -> set[str]:
    return {row[0] for row in conn.execute(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%'")}


def introspect_schema(handle: StoreHandle) -> AnnotationStructure:
    """Recover the structure from the catalog, verifying physical consistency."""
    structure = _read_catalog(handle.conn)
    report = validate_structure(structure)
    if not report.ok:
        f = report.findings[0]
        raise CorruptCatalog(f"catalog holds an invalid structure: {f.path}: {f.message}")
    plan = plan_schema(structure)
    actual_tables = _physical_tables(handle.conn)

    expected_tables = set(SYSTEM_TABLES) | set(plan["levels"])
    missing = expected_tables - actual_tables
    if missing:
        raise CorruptCatalog(f"tables missing from database: {sorted(missing)}")
    stray = {t for t in actual_tables - expected_tables if t.startswith("lvl_")}
    if stray:
        raise CorruptCatalog(f"level tables not in catalog: {sorted(stray)}")

    for table, info in plan["levels"].items():
        actual = _physical_columns(handle.conn, table)
        if actual != info["columns"]:
            raise CorruptCatalog(
                f"table {table} columns {actual} do not match catalog {info['columns']}")
    for table, cols in plan["entities"].items():
        actual = _physical_columns(handle.conn, table)
        if actual != cols:
            raise CorruptCatalog(f"table {table} columns {actual} do not match catalog {cols}")
    return structure


@dataclass(frozen=True)
class MigrationChange:
    action: str           # add-level | drop-level | add-attribute | drop-attribute | ...
    target: str
    detail: str = ""
    destructive: bool = False


@dataclass
class MigrationReport:
    changes: list[MigrationChange] = field(default_factory=list)


def _diff_attrs(old: AnnotationLevelDef, new: AnnotationLevelDef) -> list[MigrationChange]:
    out = []
    old_ids = {a.id: a for a in old.attributes}
    new_ids = {a.id: a for a in new.attributes}
    for aid, attr in new_ids.items():
        if aid not in old_ids:
            out.append(MigrationChange("add-attribute", f"{new.id}.{aid}", attr.datatype.value))
        elif old_ids[aid].datatype is not attr.datatype:
            out.append(MigrationChange("retype-attribute", f"{new.id}.{aid}",
                                       f"{old_ids[aid].datatype.value} -> {attr.datatype.value}",
                                       destructive=True))
        elif (old_ids[aid].optional != attr.optional or old_ids[aid].vocabulary != attr.vocabulary
              or old_ids[aid].name != attr.name):
            out.append(MigrationChange("update-attribute", f"{new.id}.{aid}", "catalog-only change"))
    for aid in old_ids:
        if aid not in new_ids:
            out.append(MigrationChange("drop-attribute", f"{new.id}.{aid}", destructive=True))
    return out


def _plan_migration(old: AnnotationStructure, new: AnnotationStructure) -> list[MigrationChange]:
    changes: list[MigrationChange] = []
    old_levels = {lv.id: lv for lv in old.levels}
    new_levels = {lv.id: lv for lv in new.levels}
    for lid, level in new_levels.items():
        if lid not in old_levels:
            changes.append(MigrationChange("add-level", lid, level.kind.value))
        elif old_levels[lid].kind is not level.kind:
            changes.append(MigrationChange("rekind-level", lid,
                                           f"{old_levels[lid].kind.value} -> {level.kind.value}",
                                           destructive=True))
        else:
            changes.extend(_diff_attrs(old_levels[lid], level))
    for lid in old_levels:
        if lid not in new_levels:
            changes.append(MigrationChange("drop-level", lid, destructive=True))

    # parentID column tracks Hierarchy-child status of levels present both sides
    for lid in new_levels:
        if lid in old_levels:
            had = old.hierarchy_parent(lid) is not None
            has = new.hierarchy_parent(lid) is not None
            if has and not had:
                changes.append(MigrationChange("add-parent-column", lid))
            elif had and not has:
                changes.append(MigrationChange("drop-parent-column", lid, destructive=True))

    old_rels = set(old.relations)
    new_rels = set(new.relations)
    for rel in sorted(new_rels - old_rels, key=lambda r: (r.kind.value, r.parent, r.child)):
        changes.append(MigrationChange("add-relation", f"{rel.kind.value}:{rel.parent}->{rel.child}"))
    for rel in sorted(old_rels - new_rels, key=lambda r: (r.kind.value, r.parent, r.child)):
        changes.append(MigrationChange("drop-relation", f"{rel.kind.value}:{rel.parent}->{rel.child}"))

    old_meta = {(m.object, m.id): m for m in old.metadata}
    new_meta = {(m.object, m.id): m for m in new.metadata}
    for key, meta in new_meta.items():
        if key not in old_meta:
            changes.append(MigrationChange("add-metadata", f"{key[0].value}.{key[1]}", meta.datatype.value))
        elif old_meta[key].datatype is not meta.datatype:
            changes.append(MigrationChange("retype-metadata", f"{key[0].value}.{key[1]}",
                                           f"{old_meta[key].datatype.value} -> {meta.datatype.value}",
                                           destructive=True))
        elif old_meta[key] != meta:
            changes.append(MigrationChange("update-metadata", f"{key[0].value}.{key[1]}", "catalog-only change"))
    for key in old_meta:
        if key not in new_meta:
            changes.append(MigrationChange("drop-metadata", f"{key[0].value}.{key[1]}", destructive=True))
    return changes


def _rebuild_level_table(conn: sqlite3.Connection, structure: AnnotationStructure,
                         level: AnnotationLevelDef, keep_columns: list[str]) -> None:
    table = sanitize_level_table(level.id)
    tmp = table + "__new"
    cols = _level_columns(structure, level)
    col_sql = ",\n    ".join(f"{qident(n)} {t}" for n, t in cols)
    conn.execute(f"CREATE TABLE {qident(tmp)} (\n    {col_sql},\n"
                 f"    PRIMARY KEY ({qident('annotationID')}, {qident('speakerID')}, {qident('elementID')})\n)")
    common = [n for n, _t in cols if n in keep_columns]
    collist = ", ".join(qident(c) for c in common)
    conn.execute(f"INSERT INTO {qident(tmp)} ({collist}) SELECT {collist} FROM {qident(table)}")
    conn.execute(f"DROP TABLE {qident(table)}")
    conn.execute(f"ALTER TABLE {qident(tmp)} RENAME TO {qident(table)}")


def _rebuild_entity_table(conn: sqlite3.Connection, table: str, structure: AnnotationStructure,
                          keep_columns: list[str]) -> None:
    tmp = table + "__new"
    ddl = _entity_table_ddl(table, structure).replace(f"CREATE TABLE {qident(table)}",
                                                      f"CREATE TABLE {qident(tmp)}", 1)
    conn.execute(ddl)
    cols = [n for n, _t in plan_schema(structure)["entities"][table] if n in keep_columns]
    collist = ", ".join(qident(c) for c in cols)
    conn.execute(f"INSERT INTO {qident(tmp)} ({collist}) SELECT {collist} FROM {qident(table)}")
    conn.execute(f"DROP TABLE {qident(table)}")
    conn.execute(f"ALTER TABLE {qident(tmp)} RENAME TO {qident(table)}")


def apply_schema(handle: StoreHandle, new_structure: AnnotationStructure,
                 force: bool = False) -> MigrationReport:
    """Migrate the database to a new structure.

    Additive changes (new levels, new attributes, new metadata columns) apply
    directly; destructive ones (drops, retypes) are refused unless ``force``.
    The whole migration runs in a single transaction.
    """
    _require_writable(handle)
    report = validate_structure(new_structure)
    if not report.ok:
        f = report.findings[0]
        raise ConstraintViolation(f"invalid structure: {f.path}: {f.message}")
    old_structure = introspect_schema(handle)
    changes = _plan_migration(old_structure, new_structure)
    destructive = [c for c in changes if c.destructive]
    if destructive and not force:
        detail = "; ".join(f"{c.action} {c.target}" for c in destructive)
        raise DestructiveChangeRefused(f"refusing without force: {detail}")

    old_levels = {lv.id: lv for lv in old_structure.levels}
    try:
        with _Tx(handle) as conn:
            # level tables needing a rebuild collect their kept columns first
            rebuild: dict[str, set[str]] = {}
            for change in changes:
                if change.action == "add-level":
                    level = new_structure.level(change.target)
                    conn.execute(_level_table_ddl(new_structure, level))
                elif change.action == "drop-level":
                    conn.execute(f"DROP TABLE {qident(sanitize_level_table(change.target))}")
                elif change.action == "rekind-level":
                    conn.execute(f"DROP TABLE {qident(sanitize_level_table(change.target))}")
                    conn.execute(_level_table_ddl(new_structure, new_structure.level(change.target)))
                elif change.action == "add-attribute":
                    lid, aid = change.target.split(".", 1)
                    attr = new_structure.level(lid).attribute(aid)
                    if lid not in rebuild:
                        conn.execute(f"ALTER TABLE {qident(sanitize_level_table(lid))} "
                                     f"ADD COLUMN {qident(aid)} {_SQL_TYPE[attr.datatype]}")
                elif change.action in ("drop-attribute", "retype-attribute"):
                    lid, _aid = change.target.split(".", 1)
                    rebuild.setdefault(lid, set())
                elif change.action == "add-parent-column":
                    conn.execute(f"ALTER TABLE {qident(sanitize_level_table(change.target))} "
                                 f"ADD COLUMN {qident('parentID')} INTEGER")
                elif change.action == "drop-parent-column":
                    rebuild.setdefault(change.target, set())
                elif change.action == "add-metadata":
                    obj_name, aid = change.target.split(".", 1)
                    meta = new_structure.metadata_attribute(MetadataObject(obj_name), aid)
                    table = _ENTITY_TABLE_FOR[MetadataObject(obj_name)]
                    conn.execute(f"ALTER TABLE {qident(table)} ADD COLUMN {qident(aid)} "
                                 f"{_SQL_TYPE[meta.datatype]}")
                elif change.action in ("drop-metadata", "retype-metadata"):
                    obj_name, _aid = change.target.split(".", 1)
                    table = _ENTITY_TABLE_FOR[MetadataObject(obj_name)]
                    rebuild.setdefault("entity:" + table, set())
                # relation and catalog-only updates need no DDL here

            for key in sorted(rebuild):
                if key.startswith("entity:"):
                    table = key.split(":", 1)[1]
                    old_cols = [n for n, _t in _physical_columns(conn, table)]
                    _rebuild_entity_table(conn, table, new_structure, old_cols)
                else:
                    level = new_structure.level(key)
                    if level is None:
                        continue
                    table = sanitize_level_table(key)
                    old_cols = [n for n, _t in _physical_columns(conn, table)]
                    keep = list(old_cols)
                    old_level = old_levels.get(key)
                    if old_level is not None:
                        new_ids = {a.id for a in level.attributes}
                        for a in old_level.attributes:
                            if a.id not in new_ids or level.attribute(a.id).datatype is not a.datatype:
                                if a.id in keep:
                                    keep.remove(a.id)
                    if new_structure.hierarchy_parent(key) is None and "parentID" in keep:
                        keep.remove("parentID")
                    _rebuild_level_table(conn, new_structure, level, keep)

            # attribute adds on rebuilt tables happen via the rebuild itself;
            # rebuilds recreate from the new structure so new columns exist.
            _write_catalog(conn, new_structure)
    except sqlite3.Error as exc:
        raise MigrationFailed(f"migration rolled back: {exc}") from exc

    handle.structure = new_structure
    return MigrationReport(changes=changes)


# --- tier persistence ---------------------------------------------------------

def _to_sql_value(datatype: Datatype, value: Any) -> Any:
    if value is None:
        return None
    if datatype is Datatype.Boolean:
        return int(value)
    if datatype is Datatype.DateTime:
        return value.isoformat()
    return value


def _from_sql_value(datatype: Datatype, value: Any) -> Any:
    if value is None:
        return None
    if datatype is Datatype.Boolean:
        return bool(value)
    if datatype is Datatype.Real:
        return float(value)
    if datatype is Datatype.DateTime:
        return datetime.fromisoformat(value)
    return value


def _validate_element(level: AnnotationLevelDef, has_parent: bool, el: AnnotationElement) -> None:
    where = f"{level.id}#{el.element_id}"
    if not isinstance(el.element_id, int) or el.element_id < 1:
        raise ConstraintViolation(f"{where}: element ids are integers >= 1")
    if el.t_min < 0 or el.t_max < 0:
        raise ConstraintViolation(f"{where}: negative time")
    if level.kind is LevelKind.Interval:
        if not el.t_min < el.t_max:
            raise ConstraintViolation(f"{where}: interval requires tMin < tMax (got {el.t_min}..{el.t_max})")
    else:
        if el.t_min != el.t_max:
            raise ConstraintViolation(f"{where}: point element requires tMin == tMax")
    if not isinstance(el.label, str):
        raise ConstraintViolation(f"{where}: label must be a string")
    if el.parent_id is not None and not has_parent:
        raise ConstraintViolation(f"{where}: level '{level.id}' has no Hierarchy parent, parentID not allowed")
    declared = {a.id: a for a in level.attributes}
    for aid, value in el.attributes.items():
        attr = declared.get(aid)
        if attr is None:
            raise ConstraintViolation(f"{where}: unknown attribute '{aid}'")
        if not value_matches(attr.datatype, value):
            raise ConstraintViolation(
                f"{where}: attribute '{aid}' expects {attr.datatype.value}, got {value!r}")
        if value is not None and attr.vocabulary is not None and value not in attr.vocabulary:
            raise ConstraintViolation(
                f"{where}: value {value!r} not in vocabulary of '{aid}'")
    for attr in level.attributes:
        if not attr.optional and el.attributes.get(attr.id) is None:
            raise ConstraintViolation(f"{where}: required attribute '{attr.id}' is null")


def save_tier(handle: StoreHandle, tier: Tier) -> int:
    """Atomically replace the stored elements of one tier; returns the count."""
    _require_writable(handle)
    level = handle.structure.level(tier.level_id)
    if level is None:
        raise UnknownLevel(f"no level '{tier.level_id}'")
    if tier.annotation_id is None or tier.speaker_id is None:
        raise ConstraintViolation("save_tier requires annotationID and speakerID")
    has_parent = handle.structure.hierarchy_parent(tier.level_id) is not None

    row = handle.conn.execute("SELECT communication_id FROM annotation WHERE id = ?",
                              (tier.annotation_id,)).fetchone()
    if row is None:
        raise ConstraintViolation(f"unknown annotation '{tier.annotation_id}'")
    if tier.communication_id is not None and row[0] != tier.communication_id:
        raise ConstraintViolation(
            f"annotation '{tier.annotation_id}' belongs to communication '{row[0]}', "
            f"not '{tier.communication_id}'")

    seen_ids: set[int] = set()
    for el in tier.elements:
        _validate_element(level, has_parent, el)
        if el.element_id in seen_ids:
            raise ConstraintViolation(f"duplicate element id {el.element_id} in tier {tier.level_id}")
        seen_ids.add(el.element_id)

    elements = sorted(tier.elements, key=lambda e: (e.t_min, e.element_id))
    table = sanitize_level_table(tier.level_id)
    cols = ["elementID", "annotationID", "speakerID", "tMin", "tMax", "label"]
    if has_parent:
        cols.append("parentID")
    cols.extend(a.id for a in level.attributes)
    placeholders = ", ".join("?" for _ in cols)
    collist = ", ".join(qident(c) for c in cols)

    rows = []
    for el in elements:
        row_vals: list[Any] = [el.element_id, tier.annotation_id, tier.speaker_id,
                               el.t_min, el.t_max, el.label]
        if has_parent:
            row_vals.append(el.parent_id)
        row_vals.extend(_to_sql_value(a.datatype, el.attributes.get(a.id)) for a in level.attributes)
        rows.append(tuple(row_vals))

    try:
        with _Tx(handle) as conn:
            conn.execute(f"DELETE FROM {qident(table)} WHERE {qident('annotationID')} = ? "
                         f"AND {qident('speakerID')} = ?", (tier.annotation_id, tier.speaker_id))
            conn.executemany(f"INSERT INTO {qident(table)} ({collist}) VALUES ({placeholders})", rows)
    except sqlite3.Error as exc:
        raise IoError(f"save_tier failed: {exc}") from exc
    return len(rows)


def load_tier(handle: StoreHandle, level_id: str, communication_id: str,
              speaker_id: Optional[str] = None, annotation_id: Optional[str] = None) -> Tier:
    """Load one tier; elements come back ordered by (tMin, elementID)."""
    level = handle.structure.level(level_id)
    if level is None:
        raise UnknownLevel(f"no level '{level_id}'")
    has_parent = handle.structure.hierarchy_parent(level_id) is not None
    table = sanitize_level_table(level_id)
    cols = ["elementID", "annotationID", "speakerID", "tMin", "tMax", "label"]
    if has_parent:
        cols.append("parentID")
    cols.extend(a.id for a in level.attributes)
    collist = ", ".join(f"e.{qident(c)}" for c in cols)
    sql = (f"SELECT {collist} FROM {qident(table)} e "
           f"JOIN annotation a ON e.{qident('annotationID')} = a.id WHERE a.communication_id = ?")
    params: list[Any] = [communication_id]
    if speaker_id is not None:
        sql += f" AND e.{qident('speakerID')} = ?"
        params.append(speaker_id)
    if annotation_id is not None:
        sql += f" AND e.{qident('annotationID')} = ?"
        params.append(annotation_id)
    sql += f" ORDER BY e.{qident('tMin')}, e.{qident('elementID')}"

    elements: list[AnnotationElement] = []
    ann_ids: set[str] = set()
    spk_ids: set[str] = set()
    base = 7 if has_parent else 6
    for row in handle.conn.execute(sql, params):
        ann_ids.add(row[1])
        spk_ids.add(row[2])
        attrs = {a.id: _from_sql_value(a.datatype, row[base + i])
                 for i, a in enumerate(level.attributes)}
        elements.append(AnnotationElement(
            element_id=row[0], t_min=row[3], t_max=row[4], label=row[5],
            attributes=attrs, parent_id=row[6] if has_parent else None))
    return Tier(
        communication_id=communication_id,
        annotation_id=annotation_id if annotation_id is not None else (ann_ids.pop() if len(ann_ids) == 1 else None),
        speaker_id=speaker_id if speaker_id is not None else (spk_ids.pop() if len(spk_ids) == 1 else None),
        level_id=level_id,
        elements=elements,
    )


def tier_keys(handle: StoreHandle, level_id: str,
              communication_id: str) -> list[tuple[str, str]]:
    """Distinct (annotationID, speakerID) pairs with data on a level."""
    level = handle.structure.level(level_id)
    if level is None:
        raise UnknownLevel(f"no level '{level_id}'")
    table = sanitize_level_table(level_id)
    sql = (f"SELECT DISTINCT e.{qident('annotationID')}, e.{qident('speakerID')} "
           f"FROM {qident(table)} e JOIN annotation a ON e.{qident('annotationID')} = a.id "
           f"WHERE a.communication_id = ? ORDER BY 1, 2")
    return [(r[0], r[1]) for r in handle.conn.execute(sql, (communication_id,))]


def count_elements(handle: StoreHandle, level_id: str,
                   communication_ids: Optional[Iterable[str]] = None) -> int:
    level = handle.structure.level(level_id)
    if level is None:
        raise UnknownLevel(f"no level '{level_id}'")
    table = sanitize_level_table(level_id)
    if communication_ids is None:
        return handle.conn.execute(f"SELECT COUNT(*) FROM {qident(table)}").fetchone()[0]
    ids = list(communication_ids)
    if not ids:
        return 0
    marks = ", ".join("?" for _ in ids)
    sql = (f"SELECT COUNT(*) FROM {qident(table)} e "
           f"JOIN annotation a ON e.{qident('annotationID')} = a.id "
           f"WHERE a.communication_id IN ({marks})")
    return handle.conn.execute(sql, ids).fetchone()[0]


def level_has_data(handle: StoreHandle, level_id: str) -> bool:
    table = sanitize_level_table(level_id)
    return handle.conn.execute(f"SELECT 1 FROM {qident(table)} LIMIT 1").fetchone() is not None


def attribute_has_data(handle: StoreHandle, level_id: str, attribute_id: str) -> bool:
    table = sanitize_level_table(level_id)
    return handle.conn.execute(
        f"SELECT 1 FROM {qident(table)} WHERE {qident(attribute_id)} IS NOT NULL LIMIT 1"
    ).fetchone() is not None


# --- entity persistence ---------------------------------------------------------

def _entity_row(structure: AnnotationStructure, entity) -> tuple[str, dict[str, Any], MetadataObject]:
    if isinstance(entity, Communication):
        return "communication", {"id": entity.id}, MetadataObject.Communication
    if isinstance(entity, Speaker):
        return "speaker", {"id": entity.id}, MetadataObject.Speaker
    if isinstance(entity, Recording):
        return "recording", {
            "id": entity.id, "communication_id": entity.communication_id,
            "filename": entity.filename, "duration_ns": entity.duration_ns,
            "sample_rate_hz": entity.sample_rate_hz, "channels": entity.channels,
        }, MetadataObject.Recording
    if isinstance(entity, Participation):
        return "participation", {
            "communication_id": entity.communication_id, "speaker_id": entity.speaker_id,
            "role": entity.role,
        }, MetadataObject.Participation
    if isinstance(entity, Annotation):
        return "annotation", {"id": entity.id, "communication_id": entity.communication_id
                              }, MetadataObject.Annotation
    raise TypeError(f"not a corpus entity: {type(entity).__name__}")


def save_entity(handle: StoreHandle, entity) -> None:
    """Upsert one entity row (metadata validated against the structure)."""
    _require_writable(handle)
    table, fixed, obj = _entity_row(handle.structure, entity)
    check_metadata(handle.structure, obj, entity.metadata)
    declared = handle.structure.metadata_for(obj)
    cols = list(fixed)
    for m in declared:
        cols_value = _to_sql_value(m.datatype, entity.metadata.get(m.id))
        cols[m.id] = cols_value if isinstance(cols, dict) else None  # never reached; kept for clarity
    values = dict(fixed)
    for m in declared:
        values[m.id] = _to_sql_value(m.datatype, entity.metadata.get(m.id))
    collist = ", ".join(qident(c) for c in values)
    placeholders = ", ".join("?" for _ in values)
    try:
        with _Tx(handle) as conn:
            conn.execute(f"INSERT OR REPLACE INTO {qident(table)} ({collist}) VALUES ({placeholders})",
                         tuple(values.values()))
    except sqlite3.Error as exc:
        raise IoError(f"save_entity failed: {exc}") from exc


def save_corpus(handle: StoreHandle, corpus: Corpus) -> None:
    for comm in corpus.communications.values():
        save_entity(handle, comm)
    for spk in corpus.speakers.values():
        save_entity(handle, spk)
    for rec in corpus.recordings.values():
        save_entity(handle, rec)
    for part in corpus.participations.values():
        save_entity(handle, part)
    for ann in corpus.annotations.values():
        save_entity(handle, ann)


def load_corpus(handle: StoreHandle) -> Corpus:
    structure = handle.structure
    corpus = Corpus(structure)

    def read_meta(obj: MetadataObject, row, offset: int) -> dict[str, Any]:
        out = {}
        for i, m in enumerate(structure.metadata_for(obj)):
            value = _from_sql_value(m.datatype, row[offset + i])
            if value is not None:
                out[m.id] = value
        return out

    def meta_cols(obj: MetadataObject) -> str:
        cols = [qident(m.id) for m in structure.metadata_for(obj)]
        return (", " + ", ".join(cols)) if cols else ""

    for row in handle.conn.execute(f"SELECT id{meta_cols(MetadataObject.Communication)} "
                                   f"FROM communication ORDER BY id"):
        corpus.communications[row[0]] = Communication(row[0], read_meta(MetadataObject.Communication, row, 1))
    for row in handle.conn.execute(f"SELECT id{meta_cols(MetadataObject.Speaker)} FROM speaker ORDER BY id"):
        corpus.speakers[row[0]] = Speaker(row[0], read_meta(MetadataObject.Speaker, row, 1))
    for row in handle.conn.execute(
            f"SELECT id, communication_id, filename, duration_ns, sample_rate_hz, channels"
            f"{meta_cols(MetadataObject.Recording)} FROM recording ORDER BY id"):
        corpus.recordings[row[0]] = Recording(row[0], row[1], row[2], row[3], row[4], row[5],
                                              read_meta(MetadataObject.Recording, row, 6))
    for row in handle.conn.execute(
            f"SELECT communication_id, speaker_id, role{meta_cols(MetadataObject.Participation)} "
            f"FROM participation ORDER BY communication_id, speaker_id"):
        corpus.participations[(row[0], row[1])] = Participation(row[0], row[1], row[2],
                                                                read_meta(MetadataObject.Participation, row, 3))
    for row in handle.conn.execute(f"SELECT id, communication_id{meta_cols(MetadataObject.Annotation)} "
                                   f"FROM annotation ORDER BY id"):
        corpus.annotations[row[0]] = Annotation(row[0], row[1], read_meta(MetadataObject.Annotation, row, 2))
    return corpus


def execute_sql(handle: StoreHandle, sql: str) -> tuple[list[str], list[tuple]]:
    """Run one SQL statement and fetch everything (CLI passthrough)."""
    try:
        cur = handle.conn.execute(sql)
    except sqlite3.Error as exc:
        raise IoError(f"SQL error: {exc}") from exc
    columns = [d[0] for d in cur.description] if cur.description else []
    return columns, cur.fetchall()
