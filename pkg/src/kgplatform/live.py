"""Live graph: indexes over the stable view plus streams, intents, dialogue context,
curation hot-fixes, and a line-delimited JSON service."""
from __future__ import annotations

import json
import logging
import re
import socketserver
import threading
import unicodedata
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

from kgplatform.core import (
    SAME_AS,
    EntityId,
    ExtendedTriple,
    FactKey,
    KgError,
    KgSnapshot,
    ObjectKind,
    key_to_record,
    record_to_key,
    validate_triple,
)
from kgplatform.kgq import (
    MAX_DEPTH,
    KgqError,
    Query,
    VirtualOperator,
    execute_query,
    parse_kgq,
)
from kgplatform.nerd import THETA_OBJECT_RESOLUTION, DisambiguationWeights, NerdView, content_tokens, resolve_object

log = logging.getLogger(__name__)

NAME_FIELDS = ("name", "alias")
GENDER_PREDICATES = ("sex_or_gender", "gender")
LIVE_NAMESPACE = "live"


class LiveError(KgError):
    pass


class UnknownTarget(LiveError):
    pass


class UnknownIntent(LiveError):
    pass


class NoApplicableAlternative(LiveError):
    pass


class UnresolvableReference(LiveError):
    pass


def search_tokens(text: str) -> list[str]:
    """Accent-folded lowercase alphanumeric runs: "Beyoncé" -> ["beyonce"]."""
    folded = unicodedata.normalize("NFKD", text)
    folded = "".join(ch for ch in folded if not unicodedata.combining(ch)).lower()
    return re.findall(r"[a-z0-9]+", folded)


def _edge_label(t: ExtendedTriple) -> str:
    return f"{t.predicate}.{t.r_predicate}" if t.r_id is not None else t.predicate


# -- indexes ------------------------------------------------------------------------

@dataclass
class LiveIndexes:
    """Inverted index + KV store. Treated as immutable: mutators return a new instance
    that shares untouched per-entity containers with the old one."""

    kv: dict[str, dict[FactKey, ExtendedTriple]] = field(default_factory=dict)
    inverted: dict[str, frozenset] = field(default_factory=dict)
    tokens_of: dict[str, frozenset] = field(default_factory=dict)
    incoming: dict[str, frozenset] = field(default_factory=dict)  # object -> {(label, subject, key)}
    blocked_facts: frozenset = frozenset()
    blocked_entities: frozenset = frozenset()
    pending: dict[str, tuple[str, ...]] = field(default_factory=dict)  # entity -> unresolved fields
    importance: dict[str, float] = field(default_factory=dict)
    lsn: int = 0

    def copy(self) -> "LiveIndexes":
        return replace(self, kv=dict(self.kv), inverted=dict(self.inverted), tokens_of=dict(self.tokens_of),
                       incoming=dict(self.incoming), pending=dict(self.pending))

    # read side (GraphAccess)
    def entities(self) -> list[str]:
        cached = self.__dict__.get("_sorted")
        if cached is None or cached[0] is not self.kv:
            cached = (self.kv, sorted(self.kv))
            self.__dict__["_sorted"] = cached
        return cached[1]

    def has_entity(self, e: str) -> bool:
        return e in self.kv

    def visible_facts(self, e: str) -> list[ExtendedTriple]:
        facts = self.kv.get(e)
        if not facts:
            return []
        return [t for k, t in sorted(facts.items()) if k not in self.blocked_facts]

    def search(self, text: str) -> set[str]:
        toks = search_tokens(text)
        if not toks:
            return set()
        sets = [self.inverted.get(t, frozenset()) for t in toks]
        return set(frozenset.intersection(*sets))

    def types(self, e: str) -> set[str]:
        return {str(t.object) for t in self.visible_facts(e) if t.predicate == "type" and t.r_id is None}

    def neighbors(self, e: str, pred: str, reverse: bool = False) -> set[str]:
        if reverse:
            return {s for label, s, key in self.incoming.get(e, ()) if label == pred
                    and key not in self.blocked_facts and s not in self.blocked_entities}
        return {str(t.object) for t in self.visible_facts(e)
                if t.object_kind is ObjectKind.ENTITY_REF and _edge_label(t) == pred
                and str(t.object) not in self.blocked_entities}

    def values(self, e: str, path: tuple[str, ...]) -> list[str]:
        facts = self.visible_facts(e)
        if len(path) == 1:
            out = {str(t.object) for t in facts if t.predicate == path[0] and t.r_id is None}
        else:
            p, r = path
            out = {str(t.object) for t in facts if t.predicate == p and t.r_predicate == r}
            for t in facts:
                if t.predicate == p and t.r_id is None and t.object_kind is ObjectKind.ENTITY_REF:
                    if str(t.object) not in self.blocked_entities:
                        out.update(self.values(str(t.object), (r,)))
        return sorted(out)

    def name_of(self, e: str) -> str:
        names = self.values(e, ("name",))
        return names[0] if names else e

    def gender(self, e: str) -> Optional[str]:
        for p in GENDER_PREDICATES:
            vals = self.values(e, (p,))
            if vals:
                return vals[0].lower()
        return None

    def record(self, e: str) -> dict:
        doc: dict[str, list] = {}
        for t in self.visible_facts(e):
            doc.setdefault(_edge_label(t), []).append(str(t.object))
        return doc

    # write side; callers own the copy
    def _unindex(self, e: str) -> None:
        for tok in self.tokens_of.pop(e, ()):
            rest = self.inverted[tok] - {e}
            if rest:
                self.inverted[tok] = rest
            else:
                del self.inverted[tok]
        for t in self.kv.get(e, {}).values():
            if t.object_kind is ObjectKind.ENTITY_REF:
                o = str(t.object)
                rest = self.incoming.get(o, frozenset()) - {(_edge_label(t), e, t.key)}
                if rest:
                    self.incoming[o] = rest
                else:
                    self.incoming.pop(o, None)

    def _index(self, e: str) -> None:
        toks = frozenset(tok for t in self.visible_facts(e) if t.predicate in NAME_FIELDS
                         and t.object_kind is ObjectKind.LITERAL for tok in search_tokens(str(t.object)))
        if toks:
            self.tokens_of[e] = toks
            for tok in toks:
                self.inverted[tok] = self.inverted.get(tok, frozenset()) | {e}
        for t in self.kv.get(e, {}).values():
            if t.object_kind is ObjectKind.ENTITY_REF:
                o = str(t.object)
                self.incoming[o] = self.incoming.get(o, frozenset()) | {(_edge_label(t), e, t.key)}

    def _put(self, e: str, facts: Optional[dict]) -> None:
        self._unindex(e)
        if facts:
            self.kv[e] = facts
            self._index(e)
        else:
            self.kv.pop(e, None)


def build_live_indexes(stable: Iterable[ExtendedTriple], streams: Iterable[Mapping] = (),
                       nerd_view: Optional[NerdView] = None, importance: Optional[Mapping] = None,
                       lsn: int = 0, curations: Iterable["CurationRecord"] = ()) -> LiveIndexes:
    by_entity: dict[str, dict] = {}
    for t in stable:
        if t.predicate == SAME_AS or not t.subject.is_graph:
            continue
        by_entity.setdefault(str(t.subject), {})[t.key] = t
    idx = LiveIndexes(importance={str(k): float(v) for k, v in (importance or {}).items()}, lsn=lsn)
    idx.kv = by_entity
    for e in sorted(by_entity):
        idx._index(e)
    streams = list(streams)
    if streams:
        idx = ingest_stream_records(idx, streams, nerd_view)
    for rec in curations:
        idx = apply_curation(idx, rec)
    return idx


# -- streams ------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamRecord:
    stream: str
    natural_key: str
    fields: Mapping[str, Any]
    entity_references: tuple[Mapping[str, Any], ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreamRecord":
        if isinstance(d, StreamRecord):
            return d
        return cls(d["stream"], str(d["natural_key"]), dict(d.get("fields", {})),
                   tuple(d.get("entity_references", ())))

    @property
    def entity(self) -> str:
        return f"{LIVE_NAMESPACE}:{self.stream}/{self.natural_key}"


def _stream_facts(rec: StreamRecord, nerd_view: Optional[NerdView], theta: float,
                  weights: Optional[DisambiguationWeights]) -> tuple[dict, tuple[str, ...]]:
    subject = EntityId.parse(rec.entity)
    source = f"stream:{rec.stream}"
    refs = {r["field"]: r for r in rec.entity_references}
    context = set()
    for k, v in rec.fields.items():
        context |= content_tokens(str(v))
    for r in rec.entity_references:
        context |= content_tokens(str(r.get("surface", "")))
    facts, pending = {}, []

    def add(pred, obj, kind=ObjectKind.LITERAL):
        t = ExtendedTriple(subject, pred, obj, kind, sources=(source,), trust=(1.0,))
        facts[t.key] = t

    for k, v in sorted(rec.fields.items()):
        if k not in refs:
            add(k, str(v))
    for k, r in sorted(refs.items()):
        surface = str(r.get("surface", rec.fields.get(k, "")))
        target = None
        if nerd_view is not None:
            target = resolve_object(None, nerd_view, surface, context, r.get("type_hint"), weights, theta)
        if target is None:
            add(k, surface)
            pending.append(k)
        else:
            add(k, target, ObjectKind.ENTITY_REF)
    return facts, tuple(pending)


def ingest_stream_records(indexes: LiveIndexes, records: Iterable[Union[Mapping, StreamRecord]],
                          nerd_view: Optional[NerdView] = None, theta_reject: float = THETA_OBJECT_RESOLUTION,
                          weights: Optional[DisambiguationWeights] = None) -> LiveIndexes:
    """Upsert by natural key: a repeated key replaces the previous record wholesale."""
    new = indexes.copy()
    for raw in records:
        rec = StreamRecord.from_dict(raw)
        e = rec.entity
        if e in new.blocked_entities:
            continue
        facts, pending = _stream_facts(rec, nerd_view, theta_reject, weights)
        new._put(e, facts)
        if pending:
            new.pending[e] = pending
        else:
            new.pending.pop(e, None)
    return new


def ingest_stream_record(indexes: LiveIndexes, record, nerd_view: Optional[NerdView] = None, **kw) -> LiveIndexes:
    return ingest_stream_records(indexes, [record], nerd_view, **kw)


def read_stream_file(path: Union[str, Path]) -> list[StreamRecord]:
    with open(path, encoding="utf-8") as fh:
        return [StreamRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- curation -----------------------------------------------------------------------

CURATION_ACTIONS = ("block_fact", "edit_fact", "block_entity")


@dataclass(frozen=True)
class CurationRecord:
    action: str
    fact: Optional[FactKey] = None
    entity: Optional[str] = None
    replacement: Optional[ExtendedTriple] = None

    def __post_init__(self):
        if self.action not in CURATION_ACTIONS:
            raise LiveError(f"unknown curation action {self.action!r}")
        if self.action in ("block_fact", "edit_fact") and self.fact is None:
            raise LiveError(f"{self.action} needs a fact key")
        if self.action == "edit_fact" and self.replacement is None:
            raise LiveError("edit_fact needs a full replacement triple")
        if self.action == "block_entity" and self.entity is None:
            raise LiveError("block_entity needs an entity")

    def to_record(self) -> dict:
        return {"action": self.action,
                "fact": key_to_record(self.fact) if self.fact else None,
                "entity": self.entity,
                "replacement": self.replacement.to_record() if self.replacement else None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurationRecord":
        if isinstance(d, CurationRecord):
            return d
        return cls(d["action"],
                   record_to_key(d["fact"]) if d.get("fact") else None,
                   d.get("entity"),
                   validate_triple(d["replacement"]) if d.get("replacement") else None)


def append_curation(path: Union[str, Path], record: CurationRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def read_curations(path: Union[str, Path]) -> list[CurationRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [CurationRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def apply_curation(indexes: LiveIndexes, record: Union[CurationRecord, Mapping],
                   stream_path: Union[str, Path, None] = None) -> LiveIndexes:
    """Hot-fix the indexes and, when a stream path is given, append the record for construction."""
    record = CurationRecord.from_dict(record)
    try:
        new = _apply_curation(indexes, record)
    except UnknownTarget as exc:
        log.warning("curation %s ignored: unknown target %s", record.action, exc)
        return indexes
    if stream_path is not None:
        append_curation(stream_path, record)
    return new


def _apply_curation(indexes: LiveIndexes, record: CurationRecord) -> LiveIndexes:
    new = indexes.copy()
    if record.action == "block_entity":
        if record.entity not in new.kv:
            raise UnknownTarget(record.entity)
        new._put(record.entity, None)
        new.blocked_entities = new.blocked_entities | {record.entity}
        new.pending.pop(record.entity, None)
        return new
    subject = record.fact[0]
    if record.fact not in new.kv.get(subject, {}):
        raise UnknownTarget(str(record.fact))
    if record.action == "block_fact":
        new.blocked_facts = new.blocked_facts | {record.fact}
        new._put(subject, dict(new.kv[subject]))
        return new
    facts = dict(new.kv[subject])
    del facts[record.fact]
    rep = record.replacement
    new._put(subject, facts)
    target = str(rep.subject)
    moved = dict(new.kv.get(target, {}))
    moved[rep.key] = rep
    new._put(target, moved)
    return new


def apply_curations(snapshot: KgSnapshot, records: Iterable[CurationRecord]) -> KgSnapshot:
    """Stable-KG side of curation; returns ``snapshot`` itself when nothing applies."""
    removals: set[FactKey] = set()
    upserts: dict[FactKey, ExtendedTriple] = {}
    for rec in records:
        if rec.action == "block_fact":
            removals.add(rec.fact)
            upserts.pop(rec.fact, None)
        elif rec.action == "edit_fact":
            removals.add(rec.fact)
            upserts.pop(rec.fact, None)
            upserts[rec.replacement.key] = rec.replacement
            removals.discard(rec.replacement.key)
        else:
            e = EntityId.parse(rec.entity)
            removals.update(snapshot.facts_of(e))
            removals.update(t.key for t in snapshot if t.object_kind is ObjectKind.ENTITY_REF and t.object == e)
    removals = {k for k in removals if snapshot.lookup(k) is not None}
    upserts = {k: t for k, t in upserts.items() if snapshot.lookup(k) != t}
    if not removals and not upserts:
        return snapshot
    return snapshot.with_changes(upserts=upserts.values(), removals=removals)


# -- intents --------------------------------------------------------------------------

@dataclass(frozen=True)
class Guard:
    """Holds when the argument has one of ``types`` (if any) and a value for every ``has`` predicate."""

    types: tuple[str, ...] = ()
    has: tuple[str, ...] = ()
    arg: int = 0

    def holds(self, g: LiveIndexes, args: Sequence[str]) -> bool:
        e = args[self.arg]
        if self.types and not set(self.types) & g.types(e):
            return False
        return all(g.values(e, (p,)) or g.neighbors(e, p) for p in self.has)


@dataclass(frozen=True)
class Alternative:
    guard: Guard
    template: str
    label: str = ""


@dataclass(frozen=True)
class IntentDef:
    name: str
    arg_types: tuple[tuple[str, ...], ...]
    alternatives: tuple[Alternative, ...]

    def __post_init__(self):
        if not self.alternatives:
            raise LiveError(f"intent {self.name} has no alternatives")

    @property
    def arity(self) -> int:
        return len(self.arg_types)

    @classmethod
    def from_dict(cls, d: Mapping) -> "IntentDef":
        alts = tuple(Alternative(Guard(tuple(a.get("guard", {}).get("types", ())), tuple(a.get("guard", {}).get("has", ())),
                                       a.get("guard", {}).get("arg", 0)), a["template"], a.get("label", ""))
                     for a in d["alternatives"])
        return cls(d["name"], tuple(tuple(t) for t in d.get("arg_types", [[]])), alts)


def _fill(template: str, args: Sequence[str]) -> str:
    return template.format(*(json.dumps(a)[1:-1] for a in args))


def route_intent(intent: str, args: Sequence[str], g: LiveIndexes, registry: Mapping[str, IntentDef],
                 max_depth: int = MAX_DEPTH) -> tuple[Query, str]:
    """First alternative whose guard holds, as (query, label)."""
    if intent not in registry:
        raise UnknownIntent(intent)
    d = registry[intent]
    if len(args) != d.arity:
        raise LiveError(f"{intent} takes {d.arity} arguments, got {len(args)}")
    for i, alt in enumerate(d.alternatives):
        if alt.guard.holds(g, args):
            return parse_kgq(_fill(alt.template, args), max_depth), alt.label or f"{intent}#{i}"
    raise NoApplicableAlternative(f"{intent}({', '.join(args)})")


def default_intents() -> dict[str, IntentDef]:
    person = ("person",)
    defs = [
        IntentDef("SpouseOf", (person,), (
            Alternative(Guard(person), 'MATCH (x)-[spouse]->(y) WHERE ID(x, "{0}") RETURN y', "spouse"),
        )),
        IntentDef("Birthplace", (person,), (
            Alternative(Guard(person, ("born_in",)), 'MATCH (x)-[born_in]->(y) WHERE ID(x, "{0}") RETURN y', "born_in"),
        )),
        IntentDef("AgeOf", (person,), (
            Alternative(Guard(person, ("age",)), 'MATCH (x) WHERE ID(x, "{0}") RETURN x.age', "age"),
            Alternative(Guard(person, ("birth_date",)), 'MATCH (x) WHERE ID(x, "{0}") RETURN x.birth_date', "birth_date"),
        )),
        IntentDef("HeadOfState", (("country", "city"),), (
            Alternative(Guard(("country",), ("prime_minister",)),
                        'MATCH (x)-[prime_minister]->(y) WHERE ID(x, "{0}") RETURN y', "prime_minister"),
            Alternative(Guard(("country",), ("president",)),
                        'MATCH (x)-[president]->(y) WHERE ID(x, "{0}") RETURN y', "president"),
            Alternative(Guard(("city",), ("mayor",)),
                        'MATCH (x)-[mayor]->(y) WHERE ID(x, "{0}") RETURN y', "mayor"),
        )),
        IntentDef("DirectorOf", (("film",),), (
            Alternative(Guard(("film",), ("director",)),
                        'MATCH (x)-[director]->(y) WHERE ID(x, "{0}") RETURN y', "director"),
        )),
        IntentDef("FilmsBy", (person,), (
            Alternative(Guard(person), 'MATCH (x)<-[director]-(y:film) WHERE ID(x, "{0}") RETURN y', "directed"),
        )),
    ]
    return {d.name: d for d in defs}


def default_virtual_ops() -> dict[str, VirtualOperator]:
    ops = [
        VirtualOperator("LocatedInCountry", ("x", "c"), "MATCH (x)-[located_in*3]->(c:country)"),
        VirtualOperator("SpouseOf", ("x", "y"), "MATCH (x)-[spouse]->(y)"),
        VirtualOperator("CoStars", ("a", "b"), "MATCH (a)<-[cast]-(f:film)-[cast]->(b)"),
    ]
    return {o.name: o for o in ops}


# -- context --------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextEntity:
    entity: str
    role: str  # "answer" or "arg"
    types: tuple[str, ...] = ()
    gender: Optional[str] = None


@dataclass(frozen=True)
class Interaction:
    intent: str
    args: tuple[str, ...]
    answers: tuple[str, ...]
    entities: tuple[ContextEntity, ...] = ()


def make_interaction(intent: str, args: Sequence[str], answers: Sequence[str], g: LiveIndexes) -> Interaction:
    # literal answers (an age, a date) are not referents for later pronouns
    ents = [ContextEntity(e, "answer", tuple(sorted(g.types(e))), g.gender(e)) for e in answers if g.has_entity(e)]
    ents += [ContextEntity(e, "arg", tuple(sorted(g.types(e))), g.gender(e)) for e in args]
    return Interaction(intent, tuple(args), tuple(answers), tuple(ents))


@dataclass(frozen=True)
class ContextGraph:
    interactions: tuple[Interaction, ...] = ()
    capacity: int = 8

    def __len__(self):
        return len(self.interactions)

    @property
    def last(self) -> Optional[Interaction]:
        return self.interactions[-1] if self.interactions else None


def update_context(context: ContextGraph, interaction: Interaction) -> ContextGraph:
    items = (context.interactions + (interaction,))[-context.capacity:] if context.capacity > 0 else ()
    return ContextGraph(items, context.capacity)


PRONOUN_GENDER = {"she": "female", "her": "female", "hers": "female",
                  "he": "male", "him": "male", "his": "male",
                  "it": None, "its": None, "they": None, "them": None, "their": None}


def _slot_ok(ent: ContextEntity, slot_types: Sequence[str], pronoun: Optional[str]) -> bool:
    if slot_types and not set(slot_types) & set(ent.types):
        return False
    if pronoun is None:
        return True
    want = PRONOUN_GENDER.get(pronoun)
    if want is not None:
        return ent.gender == want
    if pronoun in ("it", "its"):
        return "person" not in ent.types
    return True


def resolve_followup(parsed: Mapping[str, Any], context: ContextGraph,
                     registry: Mapping[str, IntentDef]) -> tuple[str, tuple[str, ...]]:
    """Fill a missing intent from the last turn and missing or pronoun arguments from
    the most recent context entity (answers before arguments) that fits the slot."""
    intent = parsed.get("intent")
    if intent is None:
        if context.last is None:
            raise UnresolvableReference("no previous intent")
        intent = context.last.intent
    if intent not in registry:
        raise UnknownIntent(intent)
    d = registry[intent]
    raw = list(parsed.get("args") or [None] * d.arity)
    if len(raw) != d.arity:
        raise LiveError(f"{intent} takes {d.arity} arguments, got {len(raw)}")
    args = []
    for i, a in enumerate(raw):
        if isinstance(a, str):
            args.append(a)
            continue
        pronoun = a.get("pronoun", "").lower() if isinstance(a, Mapping) else None
        if pronoun and pronoun not in PRONOUN_GENDER:
            raise UnresolvableReference(f"unknown pronoun {pronoun!r}")
        found = None
        for inter in reversed(context.interactions):
            for ent in inter.entities:
                if _slot_ok(ent, d.arg_types[i], pronoun or None):
                    found = ent.entity
                    break
            if found:
                break
        if found is None:
            raise UnresolvableReference(f"{intent} argument {i}")
        args.append(found)
    return intent, tuple(args)


# -- service ---------------------------------------------------------------------------

class LiveService:
    """Request handler; the index snapshot is swapped atomically under a single mutator lock."""

    def __init__(self, indexes: LiveIndexes, intents: Optional[Mapping[str, IntentDef]] = None,
                 virtual_ops: Optional[Mapping[str, VirtualOperator]] = None, nerd_view: Optional[NerdView] = None,
                 curation_path: Union[str, Path, None] = None, context_capacity: int = 8,
                 max_depth: int = MAX_DEPTH):
        self.indexes = indexes
        self.intents = dict(intents if intents is not None else default_intents())
        self.virtual_ops = dict(virtual_ops if virtual_ops is not None else default_virtual_ops())
        self.nerd_view = nerd_view
        self.curation_path = curation_path
        self.context_capacity = context_capacity
        self.max_depth = max_depth
        self.sessions: dict[str, ContextGraph] = {}
        self._mutate = threading.Lock()

    def resolve_surface(self, surface: str, slot_types: Sequence[str] = ()) -> Optional[str]:
        g = self.indexes
        if g.has_entity(surface):
            return surface
        hits = [e for e in g.search(surface) if not slot_types or set(slot_types) & g.types(e)]
        if not hits:
            return None
        return min(hits, key=lambda e: (-g.importance.get(e, 0.0), e))

    def _intent(self, req: Mapping) -> dict:
        q = req.get("query") or {}
        session = str(req.get("session_id", ""))
        ctx = self.sessions.get(session, ContextGraph(capacity=self.context_capacity))
        parsed = {"intent": q.get("intent"), "args": None}
        if q.get("args") is not None:
            name = q.get("intent") or (ctx.last.intent if ctx.last else None)
            slots = self.intents[name].arg_types if name in self.intents else ()
            args = []
            for i, a in enumerate(q["args"]):
                if isinstance(a, str):
                    e = self.resolve_surface(a, slots[i] if i < len(slots) else ())
                    if e is None:
                        raise UnresolvableReference(f"no entity for {a!r}")
                    args.append(e)
                else:
                    args.append(a)
            parsed["args"] = args
        intent, args = resolve_followup(parsed, ctx, self.intents)
        g = self.indexes
        query, label = route_intent(intent, args, g, self.intents, self.max_depth)
        rows = execute_query(query, g, self.virtual_ops, self.max_depth)
        answers = [r[0] for r in rows]
        self.sessions[session] = update_context(ctx, make_interaction(intent, args, answers, g))
        return {"rows": [list(r) for r in rows], "answered_by": f"{intent}/{label}",
                "intent": intent, "args": list(args), "names": [g.name_of(a) for a in answers]}

    def handle(self, req: Mapping) -> dict:
        kind = req.get("kind")
        try:
            if kind == "kgq":
                g = self.indexes
                rows = execute_query(parse_kgq(req["query"], self.max_depth), g, self.virtual_ops, self.max_depth)
                out = {"rows": [list(r) for r in rows], "answered_by": "kgq"}
            elif kind == "intent":
                out = self._intent(req)
            elif kind == "curate":
                with self._mutate:
                    self.indexes = apply_curation(self.indexes, req["record"], self.curation_path)
                out = {"rows": [], "answered_by": "curation"}
            elif kind == "stream":
                with self._mutate:
                    self.indexes = ingest_stream_records(self.indexes, req["records"], self.nerd_view)
                out = {"rows": [], "answered_by": "stream"}
            elif kind == "entity":
                out = {"rows": [[k, v] for k, v in sorted(self.indexes.record(req["entity"]).items())],
                       "answered_by": "kv"}
            else:
                raise LiveError(f"unknown request kind {kind!r}")
        except (KgqError, LiveError, KeyError, ValueError) as exc:
            return {"error": type(exc).__name__, "message": str(exc), "freshness_lsn": self.indexes.lsn}
        out["freshness_lsn"] = self.indexes.lsn
        return out


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                req = json.loads(line)
            except json.JSONDecodeError as exc:
                resp = {"error": "BadRequest", "message": str(exc)}
            else:
                resp = self.server.service.handle(req)
            self.wfile.write((json.dumps(resp, ensure_ascii=False) + "\n").encode("utf-8"))
            self.wfile.flush()


class LiveServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, service: LiveService, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.service = service


def query_server(host: str, port: int, requests: Iterable[Mapping], timeout: float = 10.0) -> list[dict]:
    import socket

    out = []
    with socket.create_connection((host, port), timeout=timeout) as sock:
        fh = sock.makefile("rwb")
        for req in requests:
            fh.write((json.dumps(req) + "\n").encode("utf-8"))
            fh.flush()
            out.append(json.loads(fh.readline()))
    return out
