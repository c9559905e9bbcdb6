"""Per-source ingestion: import, entity transform, ontology alignment, delta, export.

Every stage is a pure function of its inputs plus the source config, so the
pipelines of different sources can run side by side.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import string
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from kgplatform.core import (
    EntityId,
    ExtendedTriple,
    KgError,
    ObjectKind,
    read_jsonl,
    write_jsonl,
)
from kgplatform.ontology import Ontology

log = logging.getLogger(__name__)

Value = Union[str, dict]


class IngestError(KgError):
    pass


class FormatError(IngestError):
    def __init__(self, path, line: int, reason: str = ""):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line


class UnknownFormat(IngestError):
    pass


class DuplicateEntityId(IngestError):
    pass


class MissingIdPredicate(IngestError):
    pass


class EmptyPredicateName(IngestError):
    pass


class MissingSchemaPredicate(IngestError):
    pass


class DuplicatePredicateName(IngestError):
    pass


class UnmappedRequiredPredicate(IngestError):
    pass


class CombinerArityMismatch(IngestError):
    pass


class InvalidPgfConfig(IngestError):
    pass


# -- import -------------------------------------------------------------------

@dataclass
class RawRowSet:
    source_id: str
    groups: dict[str, list[dict]] = field(default_factory=dict)
    columns: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.source_id:
            raise ValueError("source_id must be non-empty")

    @property
    def rows(self) -> list[dict]:
        return [r for g in self.groups.values() for r in g]


@dataclass
class ImporterConfig:
    source_id: str
    format: str = "auto"


_DELIMITERS = {"tsv": "\t", "csv": ","}


def _format_for(path: Path, declared: str) -> str:
    if declared != "auto":
        return declared
    suffix = path.suffix.lower().lstrip(".")
    return {"jsonl": "jsonl", "json": "jsonl", "ndjson": "jsonl", "tsv": "tsv", "csv": "csv", "txt": "tsv"}.get(
        suffix, suffix
    )


def _read_delimited(path: Path, delimiter: str):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            return [], []
        rows = []
        for fields in reader:
            if not fields:
                continue
            if len(fields) != len(header):
                raise FormatError(path, reader.line_num, f"expected {len(header)} fields, got {len(fields)}")
            row = {}
            for col, val in zip(header, fields):
                row.setdefault(col, val)
            rows.append(row)
        return header, rows


def _read_jsonl_rows(path: Path):
    rows, columns = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(path, lineno, exc.msg) from None
            if not isinstance(obj, dict):
                raise FormatError(path, lineno, "expected a JSON object")
            for k in obj:
                if k not in columns:
                    columns.append(k)
            rows.append(obj)
    return columns, rows


def import_source(config: ImporterConfig, artifacts: Sequence[Union[str, Path]]) -> RawRowSet:
    """Read every artifact into a row group named after the file stem."""
    rowset = RawRowSet(config.source_id)
    for artifact in artifacts:
        path = Path(artifact)
        fmt = _format_for(path, config.format)
        if fmt == "jsonl":
            columns, rows = _read_jsonl_rows(path)
        elif fmt in _DELIMITERS:
            columns, rows = _read_delimited(path, _DELIMITERS[fmt])
        else:
            raise UnknownFormat(f"{path}: {fmt!r}")
        rowset.groups[path.stem] = rows
        rowset.columns[path.stem] = list(columns)
    return rowset


# -- entity transform -----------------------------------------------------------

@dataclass
class SourceEntity:
    id: EntityId
    predicates: dict[str, list[Value]] = field(default_factory=dict)

    def canonical(self, exclude: Iterable[str] = ()) -> str:
        skip = set(exclude)
        items = {
            k: sorted(json.dumps(v, sort_keys=True) for v in vals)
            for k, vals in self.predicates.items()
            if k not in skip and vals
        }
        return json.dumps(items, sort_keys=True)

    def without(self, predicates: Iterable[str]) -> "SourceEntity":
        skip = set(predicates)
        return SourceEntity(self.id, {k: list(v) for k, v in self.predicates.items() if k not in skip})

    def only(self, predicates: Iterable[str]) -> "SourceEntity":
        keep = set(predicates)
        return SourceEntity(self.id, {k: list(v) for k, v in self.predicates.items() if k in keep})

    def to_record(self) -> dict:
        return {"id": str(self.id), "predicates": self.predicates}

    @classmethod
    def from_record(cls, record: Mapping) -> "SourceEntity":
        return cls(EntityId.parse(record["id"]), {k: list(v) for k, v in record["predicates"].items()})


@dataclass
class JoinSpec:
    group: str
    on: str


@dataclass
class TransformSpec:
    id_column: str
    primary: Optional[str] = None
    joins: list[JoinSpec] = field(default_factory=list)
    schema: Optional[list[str]] = None
    multi_value_sep: Optional[str] = None


def _values(raw: Any, sep: Optional[str]) -> list[Value]:
    if raw is None or raw == "":
        return []
    if isinstance(raw, list):
        out: list[Value] = []
        for item in raw:
            out.extend(_values(item, None))
        return out
    if isinstance(raw, dict):
        return [{str(k): str(v) for k, v in raw.items() if v not in (None, "")}]
    text = str(raw)
    if sep:
        return [part.strip() for part in text.split(sep) if part.strip()]
    return [text]


def _check_columns(group: str, columns: Sequence[str]) -> None:
    seen = set()
    for col in columns:
        if col is None or not str(col).strip():
            raise EmptyPredicateName(f"group {group!r} has an empty column name")
        if col in seen:
            raise DuplicatePredicateName(f"group {group!r} repeats column {col!r}")
        seen.add(col)


def transform_entities(rows: RawRowSet, spec: TransformSpec) -> list[SourceEntity]:
    """Build one entity per primary row, joining auxiliary row groups on the id.

    A joined group may contribute several rows per entity; their values are
    appended to the entity's value lists.
    """
    if not rows.groups:
        return []
    primary = spec.primary or next(iter(rows.groups))
    _check_columns(primary, rows.columns.get(primary, []))
    if spec.id_column not in rows.columns.get(primary, []):
        raise MissingIdPredicate(f"group {primary!r} has no {spec.id_column!r} column")

    produced: list[str] = [c for c in rows.columns[primary] if c != spec.id_column]
    join_index: list[tuple[list[str], dict[str, list[dict]]]] = []
    for join in spec.joins:
        cols = rows.columns.get(join.group)
        if cols is None:
            raise IngestError(f"join group {join.group!r} not imported")
        _check_columns(join.group, cols)
        extra = [c for c in cols if c != join.on]
        clash = set(extra) & (set(produced) | {spec.id_column})
        if clash:
            raise DuplicatePredicateName(f"join {join.group!r} repeats {sorted(clash)}")
        produced.extend(extra)
        index: dict[str, list[dict]] = {}
        for r in rows.groups[join.group]:
            index.setdefault(str(r.get(join.on, "")), []).append(r)
        join_index.append((extra, index))

    schema = list(spec.schema) if spec.schema is not None else produced
    missing = [p for p in schema if p not in produced]
    if missing:
        raise MissingSchemaPredicate(f"schema predicates never produced: {missing}")

    entities: list[SourceEntity] = []
    seen: set[str] = set()
    for lineno, r in enumerate(rows.groups[primary], start=1):
        raw_id = r.get(spec.id_column)
        if raw_id in (None, ""):
            raise MissingIdPredicate(f"{primary} row {lineno} has no {spec.id_column!r}")
        local = str(raw_id)
        if local in seen:
            raise DuplicateEntityId(f"{rows.source_id}:{local}")
        seen.add(local)
        preds: dict[str, list[Value]] = {p: [] for p in schema}
        for col in rows.columns[primary]:
            if col != spec.id_column and col in preds:
                preds[col] = _values(r.get(col), spec.multi_value_sep)
        for extra, index in join_index:
            for joined in index.get(local, []):
                for col in extra:
                    if col in preds:
                        preds[col].extend(_values(joined.get(col), spec.multi_value_sep))
        entities.append(SourceEntity(EntityId(rows.source_id, local), preds))
    return entities


# -- ontology alignment ---------------------------------------------------------

RULE_KINDS = ("rename", "combine", "constant_type")


@dataclass
class PgfRule:
    kind: str
    target_predicate: str
    source_predicates: list[str] = field(default_factory=list)
    combiner: Optional[str] = None
    value: Optional[str] = None
    required: bool = False
    # renames keys inside relationship-node values
    fields: Optional[dict[str, str]] = None
    # literal objects to resolve to graph entities of this type during construction
    object_type: Optional[str] = None
    # values are ids of other entities of the same source
    ref: bool = False

    @classmethod
    def from_dict(cls, d: Mapping) -> "PgfRule":
        return cls(
            kind=d["kind"],
            target_predicate=d["target_predicate"],
            source_predicates=list(d.get("source_predicates", [])),
            combiner=d.get("combiner"),
            value=d.get("value"),
            required=bool(d.get("required", False)),
            fields=d.get("fields"),
            object_type=d.get("object_type"),
            ref=bool(d.get("ref", False)),
        )


@dataclass
class PgfConfig:
    rules: list[PgfRule]

    def validate(self, ontology: Optional[Ontology] = None) -> "PgfConfig":
        for rule in self.rules:
            if rule.kind not in RULE_KINDS:
                raise InvalidPgfConfig(f"unknown rule kind {rule.kind!r}")
            if ontology is not None and rule.target_predicate not in ontology:
                raise InvalidPgfConfig(f"target predicate {rule.target_predicate!r} not in ontology")
            if rule.kind == "rename" and len(rule.source_predicates) != 1:
                raise InvalidPgfConfig(f"rename to {rule.target_predicate!r} needs exactly one source predicate")
            if rule.kind == "combine" and not rule.combiner:
                raise InvalidPgfConfig(f"combine to {rule.target_predicate!r} needs a combiner template")
            if rule.kind == "constant_type" and not rule.value:
                raise InvalidPgfConfig("constant_type needs a value")
        return self

    @property
    def resolvable(self) -> dict[str, str]:
        """Target predicate -> expected entity type for object resolution."""
        return {r.target_predicate: r.object_type for r in self.rules if r.object_type}

    @property
    def ref_predicates(self) -> set[str]:
        return {r.target_predicate for r in self.rules if r.ref}


def _template_fields(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


def align_ontology(entities: Iterable[SourceEntity], cfg: PgfConfig) -> list[SourceEntity]:
    """Rewrite source predicates into KG-ontology predicates.

    Ids and object values stay in the source namespace; predicates not named
    by any rule are dropped.
    """
    for rule in cfg.rules:
        if rule.kind == "combine" and _template_fields(rule.combiner) != set(rule.source_predicates):
            raise CombinerArityMismatch(
                f"{rule.target_predicate}: template fields {sorted(_template_fields(rule.combiner))} "
                f"!= source predicates {sorted(rule.source_predicates)}"
            )
    out = []
    for ent in entities:
        preds: dict[str, list[Value]] = {}
        for rule in cfg.rules:
            target = preds.setdefault(rule.target_predicate, [])
            if rule.kind == "constant_type":
                if rule.value not in target:
                    target.append(rule.value)
                continue
            if rule.kind == "rename":
                values = ent.predicates.get(rule.source_predicates[0], [])
                if rule.fields:
                    values = [
                        {rule.fields.get(k, k): v for k, v in val.items()} if isinstance(val, dict) else val
                        for val in values
                    ]
                produced = list(values)
            else:
                parts = {p: ent.predicates.get(p, []) for p in rule.source_predicates}
                if any(len(v) > 1 for v in parts.values()):
                    raise CombinerArityMismatch(f"{ent.id}: combine into {rule.target_predicate} got multi-valued input")
                if all(len(v) == 1 for v in parts.values()):
                    rendered = rule.combiner.format(**{p: v[0] for p, v in parts.items()})
                    produced = [" ".join(rendered.split())]
                else:
                    produced = []
            if rule.required and not produced:
                raise UnmappedRequiredPredicate(f"{ent.id}: nothing maps to {rule.target_predicate}")
            target.extend(produced)
        out.append(SourceEntity(ent.id, {k: v for k, v in preds.items()}))
    return out


# -- export ---------------------------------------------------------------------

def mint_r_id(entity: EntityId, predicate: str, ordinal: int) -> str:
    digest = hashlib.blake2b(f"{entity}|{predicate}|{ordinal}".encode(), digest_size=6).hexdigest()
    return f"r{digest}"


def export_extended_triples(
    entities: Iterable[SourceEntity],
    source_id: str,
    default_trust: float,
    *,
    locale: Optional[str] = None,
    ref_predicates: Iterable[str] = (),
) -> list[ExtendedTriple]:
    if not 0.0 <= default_trust <= 1.0:
        raise ValueError(f"default_trust {default_trust} outside [0, 1]")
    refs = set(ref_predicates)
    prov = {"sources": (source_id,), "trust": (float(default_trust),)}
    out: list[ExtendedTriple] = []
    for ent in entities:
        for predicate in sorted(ent.predicates):
            ordinal = 0
            for value in ent.predicates[predicate]:
                if isinstance(value, dict):
                    r_id = mint_r_id(ent.id, predicate, ordinal)
                    ordinal += 1
                    for r_pred in sorted(value):
                        out.append(ExtendedTriple(
                            ent.id, predicate, str(value[r_pred]), r_id=r_id, r_predicate=r_pred,
                            locale=locale, **prov,
                        ))
                elif predicate in refs:
                    out.append(ExtendedTriple(
                        ent.id, predicate, EntityId(ent.id.namespace, str(value)),
                        object_kind=ObjectKind.ENTITY_REF, **prov,
                    ))
                else:
                    out.append(ExtendedTriple(ent.id, predicate, str(value), locale=locale, **prov))
    return out


def entities_from_triples(triples: Iterable[ExtendedTriple]) -> list[SourceEntity]:
    """Inverse of export: regroup rows by subject and relationship nodes by r_id."""
    entities: dict[EntityId, SourceEntity] = {}
    nodes: dict[tuple, dict] = {}
    for t in triples:
        ent = entities.setdefault(t.subject, SourceEntity(t.subject, {}))
        values = ent.predicates.setdefault(t.predicate, [])
        if t.r_id is not None:
            node_key = (t.subject, t.predicate, t.r_id)
            if node_key not in nodes:
                nodes[node_key] = {}
                values.append(nodes[node_key])
            nodes[node_key][t.r_predicate] = str(t.object)
        elif t.is_entity_ref:
            values.append(t.object.local_id)
        else:
            values.append(str(t.object))
    return list(entities.values())


# -- delta ------------------------------------------------------------------------

@dataclass
class SourceDelta:
    source_id: str
    added: list[SourceEntity] = field(default_factory=list)
    deleted: list[SourceEntity] = field(default_factory=list)
    updated: list[SourceEntity] = field(default_factory=list)
    volatile_dump: list[ExtendedTriple] = field(default_factory=list)
    t0: Optional[str] = None
    tn: Optional[str] = None

    @property
    def is_empty(self) -> bool:
        return not (self.added or self.deleted or self.updated)


def _by_id(entities) -> dict[EntityId, SourceEntity]:
    if entities is None:
        return {}
    if isinstance(entities, Mapping):
        return dict(entities)
    return {e.id: e for e in entities}


def compute_delta(
    prev,
    curr,
    volatile_predicates: Iterable[str] = (),
    *,
    source_id: Optional[str] = None,
    default_trust: float = 1.0,
    locale: Optional[str] = None,
    t0: Optional[str] = None,
    tn: Optional[str] = None,
) -> SourceDelta:
    """Split the current aligned snapshot against the previously consumed one."""
    volatile = set(volatile_predicates)
    before, after = _by_id(prev), _by_id(curr)
    if source_id is None:
        namespaces = {e.namespace for e in list(before) + list(after)}
        source_id = namespaces.pop() if len(namespaces) == 1 else "unknown"
    delta = SourceDelta(source_id, t0=t0, tn=tn)
    for eid in sorted(after):
        if eid not in before:
            delta.added.append(after[eid].without(volatile))
        elif after[eid].canonical(volatile) != before[eid].canonical(volatile):
            delta.updated.append(after[eid].without(volatile))
    for eid in sorted(before):
        if eid not in after:
            delta.deleted.append(before[eid].without(volatile))
    if volatile:
        delta.volatile_dump = export_extended_triples(
            (after[eid].only(volatile) for eid in sorted(after)), source_id, default_trust, locale=locale
        )
    return delta


DELTA_PARTS = ("added", "deleted", "updated")


def write_delta(delta: SourceDelta, root: Union[str, Path], *, default_trust: float = 1.0,
                locale: Optional[str] = None, ref_predicates: Iterable[str] = ()) -> Path:
    """Materialize as ``<root>/<source_id>/<tn>/{added,deleted,updated,volatile}.jsonl``."""
    out = Path(root) / delta.source_id / str(delta.tn or "0")
    out.mkdir(parents=True, exist_ok=True)
    for part in DELTA_PARTS:
        write_jsonl(out / f"{part}.jsonl", export_extended_triples(
            getattr(delta, part), delta.source_id, default_trust, locale=locale, ref_predicates=ref_predicates))
    write_jsonl(out / "volatile.jsonl", delta.volatile_dump)
    return out


def read_delta(directory: Union[str, Path], source_id: str, t0: Optional[str] = None) -> SourceDelta:
    directory = Path(directory)
    parts = {p: entities_from_triples(read_jsonl(directory / f"{p}.jsonl")) for p in DELTA_PARTS}
    return SourceDelta(source_id, volatile_dump=read_jsonl(directory / "volatile.jsonl"),
                       t0=t0, tn=directory.name, **parts)


def write_entities(path: Union[str, Path], entities: Iterable[SourceEntity]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for e in entities:
            fh.write(json.dumps(e.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
    tmp.replace(path)


def read_entities(path: Union[str, Path]) -> list[SourceEntity]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [SourceEntity.from_record(json.loads(line)) for line in fh if line.strip()]


# -- per-source config ---------------------------------------------------------------

@dataclass
class SourceConfig:
    source_id: str
    format: str = "auto"
    artifacts: list[Path] = field(default_factory=list)
    id_column: str = "id"
    primary: Optional[str] = None
    joins: list[JoinSpec] = field(default_factory=list)
    schema: Optional[list[str]] = None
    multi_value_sep: Optional[str] = None
    pgf: PgfConfig = field(default_factory=lambda: PgfConfig([]))
    volatile_predicates: list[str] = field(default_factory=list)
    default_trust: float = 0.8
    locale: Optional[str] = "en"
    entity_type: Optional[str] = None
    linking: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Union[str, Path] = ".") -> "SourceConfig":
        base = Path(base_dir)
        if not d.get("source_id"):
            raise IngestError("source config needs source_id")
        trust = float(d.get("default_trust", 0.8))
        if not 0.0 <= trust <= 1.0:
            raise IngestError(f"default_trust {trust} outside [0, 1]")
        return cls(
            source_id=d["source_id"],
            format=d.get("format", "auto"),
            artifacts=[base / a for a in d.get("artifacts", [])],
            id_column=d.get("id_column", "id"),
            primary=d.get("primary"),
            joins=[JoinSpec(j["group"], j["on"]) for j in d.get("joins", [])],
            schema=d.get("schema"),
            multi_value_sep=d.get("multi_value_sep"),
            pgf=PgfConfig([PgfRule.from_dict(r) for r in d.get("pgf_rules", [])]),
            volatile_predicates=list(d.get("volatile_predicates", [])),
            default_trust=trust,
            locale=d.get("locale", "en"),
            entity_type=d.get("entity_type"),
            linking=dict(d.get("linking", {})),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SourceConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)

    @property
    def transform_spec(self) -> TransformSpec:
        return TransformSpec(self.id_column, self.primary, self.joins, self.schema, self.multi_value_sep)


def run_source_pipeline(
    config: SourceConfig,
    previous: Iterable[SourceEntity] = (),
    *,
    ontology: Optional[Ontology] = None,
    t0: Optional[str] = None,
    tn: Optional[str] = None,
) -> tuple[list[SourceEntity], SourceDelta]:
    """import -> transform -> align -> delta for one source."""
    rows = import_source(ImporterConfig(config.source_id, config.format), config.artifacts)
    entities = transform_entities(rows, config.transform_spec)
    aligned = align_ontology(entities, config.pgf.validate(ontology))
    delta = compute_delta(
        previous, aligned, config.volatile_predicates,
        source_id=config.source_id, default_trust=config.default_trust,
        locale=config.locale, t0=t0, tn=tn,
    )
    log.info("source %s: +%d ~%d -%d (volatile rows %d)", config.source_id,
             len(delta.added), len(delta.updated), len(delta.deleted), len(delta.volatile_dump))
    return aligned, delta
