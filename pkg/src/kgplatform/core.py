"""Extended-triple data model and copy-on-write KG snapshots.

A fact is one flat row: subject, predicate, an optional relationship node
(r_id, r_predicate), an object that is a literal or an entity reference, an
optional locale, and two parallel provenance arrays (sources, trust).
"""
from __future__ import annotations

import enum
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Optional, Union

GRAPH_NAMESPACE = "akg"
SAME_AS = "same_as"

JSONL_FIELDS = (
    "subject",
    "predicate",
    "r_id",
    "r_predicate",
    "object",
    "object_kind",
    "locale",
    "sources",
    "trust",
)


class KgError(Exception):
    """Base class for all errors raised by this package."""


class TripleValidationError(KgError, ValueError):
    pass


class EmptySources(TripleValidationError):
    pass


class ArrayLengthMismatch(TripleValidationError):
    pass


class DanglingCompositeField(TripleValidationError):
    pass


class TrustOutOfRange(TripleValidationError):
    pass


class LocaleOnEntityRef(TripleValidationError):
    pass


class MissingColumn(TripleValidationError):
    pass


class NotComposite(KgError):
    pass


@dataclass(frozen=True, order=True)
class EntityId:
    namespace: str
    local_id: str

    def __post_init__(self):
        if not self.namespace or not self.local_id:
            raise ValueError(f"empty entity id component: {self.namespace!r}:{self.local_id!r}")
        if ":" in self.namespace:
            raise ValueError(f"namespace may not contain ':': {self.namespace!r}")

    def __str__(self) -> str:
        return f"{self.namespace}:{self.local_id}"

    @classmethod
    def parse(cls, text: Union[str, "EntityId"]) -> "EntityId":
        if isinstance(text, EntityId):
            return text
        ns, sep, local = str(text).partition(":")
        if not sep:
            raise ValueError(f"entity id needs a namespace prefix: {text!r}")
        return cls(ns, local)

    @property
    def is_graph(self) -> bool:
        return self.namespace == GRAPH_NAMESPACE


class ObjectKind(str, enum.Enum):
    LITERAL = "literal"
    ENTITY_REF = "entity_ref"


FactKey = tuple  # (subject, predicate, r_id, r_predicate, object_kind, object, locale) as strings


@dataclass(frozen=True)
class ExtendedTriple:
    subject: EntityId
    predicate: str
    object: Union[str, EntityId]
    object_kind: ObjectKind = ObjectKind.LITERAL
    r_id: Optional[str] = None
    r_predicate: Optional[str] = None
    locale: Optional[str] = None
    sources: tuple[str, ...] = ()
    trust: tuple[float, ...] = ()

    @property
    def is_composite(self) -> bool:
        return self.r_id is not None

    @property
    def is_entity_ref(self) -> bool:
        return self.object_kind is ObjectKind.ENTITY_REF

    @property
    def key(self) -> FactKey:
        return (
            str(self.subject),
            self.predicate,
            self.r_id or "",
            self.r_predicate or "",
            self.object_kind.value,
            str(self.object),
            self.locale or "",
        )

    def trust_of(self, source: str) -> Optional[float]:
        for s, t in zip(self.sources, self.trust):
            if s == source:
                return t
        return None

    def replace(self, **changes) -> "ExtendedTriple":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return ExtendedTriple(**data)

    def to_record(self) -> dict:
        return {
            "subject": str(self.subject),
            "predicate": self.predicate,
            "r_id": self.r_id,
            "r_predicate": self.r_predicate,
            "object": str(self.object),
            "object_kind": self.object_kind.value,
            "locale": self.locale,
            "sources": list(self.sources),
            "trust": list(self.trust),
        }


def key_to_record(key: FactKey) -> dict:
    subject, predicate, r_id, r_predicate, kind, obj, locale = key
    return {
        "subject": subject,
        "predicate": predicate,
        "r_id": r_id or None,
        "r_predicate": r_predicate or None,
        "object_kind": kind,
        "object": obj,
        "locale": locale or None,
    }


def record_to_key(record: Mapping[str, Any]) -> FactKey:
    return (
        str(record["subject"]),
        record["predicate"],
        record.get("r_id") or "",
        record.get("r_predicate") or "",
        record.get("object_kind") or ObjectKind.LITERAL.value,
        str(record["object"]),
        record.get("locale") or "",
    )


def validate_triple(record: Union[Mapping[str, Any], ExtendedTriple]) -> ExtendedTriple:
    """Check one raw extended-triple record and return the typed fact.

    Accepts the JSON Lines record layout (entity ids as ``ns:local`` strings)
    or an already-built :class:`ExtendedTriple`.
    """
    if isinstance(record, ExtendedTriple):
        record = record.to_record()
    for column in ("subject", "predicate", "object", "sources", "trust"):
        if column not in record:
            raise MissingColumn(column)
    predicate = record["predicate"]
    if not predicate:
        raise MissingColumn("predicate")

    sources = tuple(record["sources"] or ())
    trust = tuple(float(t) for t in (record["trust"] or ()))
    if not sources:
        raise EmptySources(f"{record['subject']} {predicate}")
    if len(sources) != len(trust):
        raise ArrayLengthMismatch(f"{len(sources)} sources vs {len(trust)} trust values")
    for t in trust:
        if not (0.0 <= t <= 1.0) or math.isnan(t):
            raise TrustOutOfRange(t)

    r_id = record.get("r_id") or None
    r_predicate = record.get("r_predicate") or None
    if (r_id is None) != (r_predicate is None):
        raise DanglingCompositeField(f"r_id={r_id!r} r_predicate={r_predicate!r}")

    kind = ObjectKind(record.get("object_kind") or ObjectKind.LITERAL.value)
    locale = record.get("locale") or None
    if kind is ObjectKind.ENTITY_REF:
        if locale is not None:
            raise LocaleOnEntityRef(f"{record['subject']} {predicate}")
        obj: Union[str, EntityId] = EntityId.parse(record["object"])
    else:
        obj = str(record["object"])

    return ExtendedTriple(
        subject=EntityId.parse(record["subject"]),
        predicate=predicate,
        object=obj,
        object_kind=kind,
        r_id=r_id,
        r_predicate=r_predicate,
        locale=locale,
        sources=sources,
        trust=trust,
    )


def merge_provenance(existing: ExtendedTriple, incoming: ExtendedTriple) -> ExtendedTriple:
    """Union source arrays; an incoming trust value replaces the stored one for that source."""
    sources = list(existing.sources)
    trust = list(existing.trust)
    for s, t in zip(incoming.sources, incoming.trust):
        if s in sources:
            trust[sources.index(s)] = t
        else:
            sources.append(s)
            trust.append(t)
    return existing.replace(sources=tuple(sources), trust=tuple(trust))


def strip_source(triple: ExtendedTriple, source: str) -> Optional[ExtendedTriple]:
    """Remove one source from a fact; None when no source remains."""
    if source not in triple.sources:
        return triple
    pairs = [(s, t) for s, t in zip(triple.sources, triple.trust) if s != source]
    if not pairs:
        return None
    return triple.replace(sources=tuple(p[0] for p in pairs), trust=tuple(p[1] for p in pairs))


@dataclass(frozen=True)
class FactConfidence:
    probability: float


class KgSnapshot:
    """Immutable, versioned set of extended triples partitioned by subject.

    New versions share untouched per-subject partitions with their parent, so
    an update costs a shallow copy of the subject map plus the touched
    partitions.
    """

    __slots__ = ("version", "_by_subject", "_size", "confidence")

    def __init__(
        self,
        by_subject: Optional[Mapping[EntityId, Mapping[FactKey, ExtendedTriple]]] = None,
        version: int = 0,
        confidence: Optional[Mapping[FactKey, float]] = None,
    ):
        parts = {s: MappingProxyType(dict(p)) for s, p in (by_subject or {}).items() if p}
        self._by_subject = parts
        self._size = sum(len(p) for p in parts.values())
        self.version = version
        self.confidence = MappingProxyType(dict(confidence or {}))

    @classmethod
    def from_triples(cls, triples: Iterable[ExtendedTriple], version: int = 0) -> "KgSnapshot":
        return upsert_triples(cls(version=version - 1), triples)

    @classmethod
    def _raw(cls, parts, version, confidence) -> "KgSnapshot":
        snap = cls.__new__(cls)
        snap._by_subject = parts
        snap._size = sum(len(p) for p in parts.values())
        snap.version = version
        snap.confidence = MappingProxyType(dict(confidence))
        return snap

    def __len__(self) -> int:
        return self._size

    def __iter__(self) -> Iterator[ExtendedTriple]:
        for part in self._by_subject.values():
            yield from part.values()

    def __contains__(self, key: FactKey) -> bool:
        return self.lookup(key) is not None

    @property
    def triples(self) -> frozenset[ExtendedTriple]:
        return frozenset(self)

    @property
    def subject_index(self) -> Mapping[EntityId, Mapping[FactKey, ExtendedTriple]]:
        return MappingProxyType(self._by_subject)

    def subjects(self) -> list[EntityId]:
        return sorted(self._by_subject)

    def facts_of(self, subject: EntityId) -> Mapping[FactKey, ExtendedTriple]:
        return self._by_subject.get(subject, MappingProxyType({}))

    def lookup(self, key: FactKey) -> Optional[ExtendedTriple]:
        part = self._by_subject.get(EntityId.parse(key[0]))
        return None if part is None else part.get(key)

    def sorted_triples(self) -> list[ExtendedTriple]:
        return sorted(self, key=lambda t: t.key)

    def with_changes(
        self,
        upserts: Iterable[ExtendedTriple] = (),
        removals: Iterable[FactKey] = (),
        confidence: Optional[Mapping[FactKey, float]] = None,
    ) -> "KgSnapshot":
        """New version where removals are dropped and upserts replace by key."""
        parts = dict(self._by_subject)
        touched: dict[EntityId, dict] = {}

        def part_for(subject: EntityId) -> dict:
            if subject not in touched:
                touched[subject] = dict(parts.get(subject, {}))
            return touched[subject]

        for key in removals:
            part_for(EntityId.parse(key[0])).pop(key, None)
        for t in upserts:
            part_for(t.subject)[t.key] = t
        for subject, part in touched.items():
            if part:
                parts[subject] = MappingProxyType(part)
            else:
                parts.pop(subject, None)
        conf = dict(self.confidence) if confidence is None else confidence
        return KgSnapshot._raw(parts, self.version + 1, conf)


def upsert_triples(snapshot: KgSnapshot, batch: Iterable[ExtendedTriple]) -> KgSnapshot:
    pending: dict[FactKey, ExtendedTriple] = {}
    for t in batch:
        key = t.key
        current = pending.get(key) or snapshot.lookup(key)
        pending[key] = t if current is None else merge_provenance(current, t)
    return snapshot.with_changes(upserts=pending.values())


def get_entity(snapshot: KgSnapshot, entity: EntityId) -> list[ExtendedTriple]:
    return sorted(snapshot.facts_of(entity).values(), key=lambda t: t.key)


def get_one_hop(snapshot: KgSnapshot, entity: EntityId, predicate: str) -> dict[str, dict[str, Any]]:
    groups: dict[str, dict[str, Any]] = {}
    simple = False
    for t in get_entity(snapshot, entity):
        if t.predicate != predicate:
            continue
        if t.r_id is None:
            simple = True
            continue
        groups.setdefault(t.r_id, {})[t.r_predicate] = t.object
    if not groups and simple:
        raise NotComposite(f"{entity} {predicate}")
    return groups


def same_as_index(snapshot: KgSnapshot) -> dict[EntityId, EntityId]:
    """Map every linked source entity id to its graph entity id."""
    links = {}
    for t in snapshot:
        if t.predicate == SAME_AS and t.is_entity_ref:
            links[t.object] = t.subject
    return links


def write_jsonl(path: Union[str, Path], triples: Iterable[ExtendedTriple]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_record(), ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def read_jsonl(path: Union[str, Path]) -> list[ExtendedTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(validate_triple(json.loads(line)))
    return out
