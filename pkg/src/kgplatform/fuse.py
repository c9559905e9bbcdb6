"""Fusion of linked source payloads into the KG.

Simple facts are outer-joined on their key (provenance merged, new keys
inserted). Relationship nodes are matched to existing nodes by overlap of
their (r_predicate, object) facts. Fact confidence is a noisy-or over source
trust, and source trust comes from a truth-discovery fixed point.
"""
from __future__ import annotations

import contextlib
import logging
import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from kgplatform.core import (
    SAME_AS,
    EntityId,
    ExtendedTriple,
    FactConfidence,
    KgError,
    KgSnapshot,
    ObjectKind,
    merge_provenance,
    same_as_index,
    strip_source,
)
from kgplatform.ingest import SourceConfig, SourceDelta, SourceEntity, export_extended_triples
from kgplatform.link import LinkingConfig, extract_kg_view, flatten_source, link_entities
from kgplatform.nerd import NerdView, build_entity_view, content_tokens, resolve_object
from kgplatform.ontology import Ontology

log = logging.getLogger(__name__)

THETA_REL = 0.5
INITIAL_TRUST = 0.7


class FusionError(KgError):
    pass


class UnlinkedSubject(FusionError):
    pass


class UnknownSource(FusionError, KeyError):
    pass


class WriterBusy(FusionError):
    pass


# -- simple facts -----------------------------------------------------------------

def fuse_simple_facts(snapshot: KgSnapshot, linked: Iterable[ExtendedTriple]) -> KgSnapshot:
    pending: dict = {}
    for t in linked:
        if not t.subject.is_graph:
            raise UnlinkedSubject(str(t.subject))
        current = pending.get(t.key) or snapshot.lookup(t.key)
        pending[t.key] = t if current is None else merge_provenance(current, t)
    changed = [t for k, t in pending.items() if snapshot.lookup(k) != t]
    return snapshot.with_changes(upserts=changed)


# -- relationship nodes -----------------------------------------------------------

@dataclass(frozen=True)
class RelationshipMergeDecision:
    predicate: str
    source_r_id: str
    kg_r_id: Optional[str]  # None means a new node
    overlap_ratio: float

    @property
    def merged(self) -> bool:
        return self.kg_r_id is not None


def _node_facts(triples: Iterable[ExtendedTriple]) -> dict:
    nodes: dict = {}
    for t in triples:
        if t.r_id is not None:
            nodes.setdefault((t.predicate, t.r_id), set()).add((t.r_predicate, t.object_kind.value, str(t.object)))
    return nodes


def merge_relationship_nodes(kg_entity_triples: Iterable[ExtendedTriple], source_entity_triples: Iterable[ExtendedTriple],
                             theta_rel: float = THETA_REL) -> list[RelationshipMergeDecision]:
    """Match each source node to a KG node of the same predicate when at least
    ``theta_rel`` of the source node's facts already exist there. Greedy one-to-one,
    highest ratio first, ties on the smaller KG r_id."""
    kg_nodes = _node_facts(kg_entity_triples)
    src_nodes = _node_facts(source_entity_triples)
    options = []
    for (pred, sr), sfacts in src_nodes.items():
        for (kpred, kr), kfacts in kg_nodes.items():
            if kpred == pred:
                ratio = len(sfacts & kfacts) / len(sfacts)
                options.append((-ratio, pred, sr, kr))
    options.sort()
    taken_src, taken_kg, decisions = set(), set(), {}
    for neg, pred, sr, kr in options:
        if -neg < theta_rel or (pred, sr) in taken_src or (pred, kr) in taken_kg:
            continue
        taken_src.add((pred, sr))
        taken_kg.add((pred, kr))
        decisions[(pred, sr)] = RelationshipMergeDecision(pred, sr, kr, -neg)
    out = []
    for (pred, sr), sfacts in sorted(src_nodes.items()):
        if (pred, sr) in decisions:
            out.append(decisions[(pred, sr)])
        else:
            best = max((-o[0] for o in options if o[1] == pred and o[2] == sr), default=0.0)
            out.append(RelationshipMergeDecision(pred, sr, None, best))
    return out


# -- confidence and truth discovery -----------------------------------------------------

def estimate_fact_confidence(fact: ExtendedTriple, trust_table: Mapping[str, float]) -> FactConfidence:
    miss = 1.0
    for s in fact.sources:
        if s not in trust_table:
            raise UnknownSource(s)
        miss *= 1.0 - trust_table[s]
    return FactConfidence(1.0 - miss)


@dataclass
class SourceTrustTable:
    trust: dict[str, float]
    iteration_count: int
    converged: bool

    def to_record(self) -> dict:
        return {"trust": dict(sorted(self.trust.items())), "iteration_count": self.iteration_count,
                "converged": self.converged}


def update_source_trust(snapshot: Union[KgSnapshot, Iterable[ExtendedTriple]],
                        initial_trust: Union[float, Mapping[str, float]] = INITIAL_TRUST,
                        max_iters: int = 100, eps: float = 1e-6,
                        functional_predicates: Iterable[str] = (),
                        history: Optional[list] = None) -> SourceTrustTable:
    """Fixed point of: fact confidence = noisy-or of its sources' trust, split
    among disagreeing values of a functional slot as c_i * c_i / sum_j c_j; a
    source's trust = mean confidence of the facts it asserts."""
    facts = [t for t in snapshot if t.predicate != SAME_AS]
    sources = sorted({s for t in facts for s in t.sources})
    if not sources:
        return SourceTrustTable({}, 0, True)
    sidx = {s: i for i, s in enumerate(sources)}
    if isinstance(initial_trust, Mapping):
        trust = np.array([initial_trust.get(s, INITIAL_TRUST) for s in sources], dtype=float)
    else:
        trust = np.full(len(sources), float(initial_trust))
    fact_of, src_of = [], []
    for i, t in enumerate(facts):
        for s in t.sources:
            fact_of.append(i)
            src_of.append(sidx[s])
    fact_of, src_of = np.array(fact_of), np.array(src_of)
    functional = set(functional_predicates)
    slot_ids: dict = {}
    slot = np.full(len(facts), -1)
    for i, t in enumerate(facts):
        if t.predicate in functional and t.r_id is None:
            slot[i] = slot_ids.setdefault((t.subject, t.predicate), len(slot_ids))
    contested = slot >= 0
    slot_c = np.where(contested, slot, 0)
    per_source = np.bincount(src_of, minlength=len(sources)).astype(float)
    converged, it = False, 0
    with np.errstate(divide="ignore"):
        for it in range(1, max_iters + 1):
            log_miss = np.zeros(len(facts))
            np.add.at(log_miss, fact_of, np.log1p(-np.clip(trust[src_of], 0.0, 1.0)))
            c = 1.0 - np.exp(log_miss)
            totals = np.bincount(slot_c[contested], weights=c[contested], minlength=len(slot_ids))
            conf = c.copy()
            denom = totals[slot_c[contested]]
            conf[contested] = np.where(denom > 0, c[contested] ** 2 / np.where(denom > 0, denom, 1.0), 0.0)
            new = np.bincount(src_of, weights=conf[fact_of], minlength=len(sources)) / per_source
            new = np.clip(new, 0.0, 1.0)
            change = float(np.max(np.abs(new - trust)))
            trust = new
            if history is not None:
                history.append(dict(zip(sources, map(float, trust))))
            if change < eps:
                converged = True
                break
    return SourceTrustTable(dict(zip(sources, map(float, trust))), it, converged)


def confidence_map(snapshot: KgSnapshot, trust: Mapping[str, float]) -> dict:
    out = {}
    for t in snapshot:
        miss = 1.0
        for s in t.sources:
            miss *= 1.0 - trust.get(s, INITIAL_TRUST)
        out[t.key] = 1.0 - miss
    return out


# -- deletions and volatile partitions -------------------------------------------------

def _strip_entity(snapshot_or_facts, source_id: str):
    ups, rem = [], []
    for t in snapshot_or_facts:
        if source_id not in t.sources:
            continue
        stripped = strip_source(t, source_id)
        if stripped is None:
            rem.append(t.key)
        else:
            ups.append(stripped)
    return ups, rem


def apply_deletions(snapshot: KgSnapshot, deleted: Iterable[Union[SourceEntity, EntityId]], source_id: str,
                    links: Optional[Mapping[EntityId, EntityId]] = None) -> KgSnapshot:
    links = dict(same_as_index(snapshot) if links is None else links)
    ups: dict = {}
    rem: set = set()
    for ent in deleted:
        eid = ent.id if isinstance(ent, SourceEntity) else ent
        g = links.pop(eid, None)
        if g is None:
            log.warning("NeverLinked: deleted entity %s has no same_as link; skipped", eid)
            continue
        link_fact = next(t for t in snapshot.facts_of(g).values() if t.predicate == SAME_AS and t.object == eid)
        rem.add(link_fact.key)
        if any(other.namespace == eid.namespace and target == g for other, target in links.items()):
            # another entity of this source still feeds g: keep the source's facts
            continue
        facts = [ups.get(t.key, t) for t in snapshot.facts_of(g).values()
                 if t.predicate != SAME_AS and t.key not in rem]
        u, r = _strip_entity(facts, source_id)
        for t in u:
            ups[t.key] = t
        for k in r:
            ups.pop(k, None)
            rem.add(k)
    return snapshot.with_changes(upserts=ups.values(), removals=rem)


def overwrite_volatile_partition(snapshot: KgSnapshot, source_id: str, volatile_triples: Iterable[ExtendedTriple],
                                 predicates: Optional[Iterable[str]] = None,
                                 links: Optional[Mapping[EntityId, EntityId]] = None) -> KgSnapshot:
    """Drop this source's contribution to every volatile fact, then insert the new dump."""
    volatile_triples = list(volatile_triples)
    preds = set(predicates) if predicates is not None else {t.predicate for t in volatile_triples}
    links = same_as_index(snapshot) if links is None else links
    old = [t for t in snapshot if t.predicate in preds and source_id in t.sources]
    ups, rem = _strip_entity(old, source_id)
    base = snapshot.with_changes(upserts=ups, removals=rem)
    mapped = []
    for t in volatile_triples:
        g = t.subject if t.subject.is_graph else links.get(t.subject)
        if g is None:
            log.warning("UnlinkedVolatileSubject: %s %s skipped", t.subject, t.predicate)
            continue
        mapped.append(t.replace(subject=g))
    return fuse_simple_facts(base, mapped)


# -- per-source construction ---------------------------------------------------------

@dataclass
class FusionReport:
    source_id: str
    facts_added: int = 0
    facts_updated: int = 0
    facts_removed: int = 0
    entities_created: int = 0
    relationship_nodes_merged: int = 0
    relationship_nodes_created: int = 0
    objects_resolved: int = 0
    trust: dict = field(default_factory=dict)
    trust_iterations: int = 0
    trust_converged: bool = True
    review: list = field(default_factory=list)
    changed_entities: list = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)


def diff_snapshots(old: KgSnapshot, new: KgSnapshot):
    """(added keys, updated keys, removed keys, touched subjects); shared partitions are skipped."""
    added, updated, removed, touched = [], [], [], set()
    subjects = set(old.subject_index) | set(new.subject_index)
    for s in subjects:
        a, b = old.subject_index.get(s), new.subject_index.get(s)
        if a is b:
            continue
        a, b = a or {}, b or {}
        if a == b:
            continue
        touched.add(s)
        for k, t in b.items():
            if k not in a:
                added.append(k)
            elif a[k] != t:
                updated.append(k)
        removed.extend(k for k in a if k not in b)
    return added, updated, removed, touched


def _entity_type(ent: SourceEntity, config: SourceConfig) -> str:
    if config.entity_type:
        return config.entity_type
    types = [v for v in ent.predicates.get("type", []) if isinstance(v, str)]
    return sorted(types)[0] if types else "entity"


def _resolve_objects(triples: list[ExtendedTriple], entity: SourceEntity, resolvable: Mapping[str, str],
                     snapshot: KgSnapshot, view: NerdView, theta: float) -> tuple[list[ExtendedTriple], int]:
    if not resolvable:
        return triples, 0
    context = set()
    for values in entity.predicates.values():
        for v in values:
            for x in (v.values() if isinstance(v, dict) else [v]):
                context |= content_tokens(str(x))
    out, n = [], 0
    for t in triples:
        name = f"{t.predicate}.{t.r_predicate}" if t.r_id else t.predicate
        expected = resolvable.get(name) or resolvable.get(t.predicate)
        if expected and t.object_kind is ObjectKind.LITERAL:
            hit = resolve_object(snapshot, view, str(t.object), context, expected, theta_reject=theta)
            if hit is not None:
                t = t.replace(object=hit, object_kind=ObjectKind.ENTITY_REF, locale=None)
                n += 1
        out.append(t)
    return out, n


def process_source_payloads(snapshot: KgSnapshot, delta: SourceDelta, config: SourceConfig, *,
                            ontology: Optional[Ontology] = None, linking: Optional[LinkingConfig] = None,
                            encoders: Optional[Mapping] = None, nerd_view: Optional[NerdView] = None,
                            importance: Optional[Mapping] = None, theta_rel: float = THETA_REL,
                            theta_resolve: float = 0.9) -> tuple[KgSnapshot, FusionReport]:
    """Link, resolve, fuse, delete, and overwrite volatile facts for one source delta.

    Pure with respect to ``snapshot``: any exception leaves the caller's snapshot as it was.
    """
    src = config.source_id
    report = FusionReport(src)
    start = snapshot
    links = same_as_index(snapshot)
    per_type: dict[str, LinkingConfig] = {}

    def linking_for(etype: str) -> LinkingConfig:
        if linking is not None:
            return linking
        if etype not in per_type:
            spec = dict(config.linking)
            spec.update(spec.pop("types", {}).get(etype, {}))
            per_type[etype] = LinkingConfig.from_dict(spec, encoders)
        return per_type[etype]

    ids: dict[EntityId, EntityId] = {}

    # Updated: keep the existing link
    to_link: list[SourceEntity] = []
    for ent in delta.updated:
        g = links.get(ent.id)
        if g is None:
            to_link.append(ent)
            continue
        ids[ent.id] = g

    # Added: already-linked ids are a lookup, the rest go through linking per type
    for ent in delta.added:
        if ent.id in links:
            ids[ent.id] = links[ent.id]
        else:
            to_link.append(ent)
    by_type: dict[str, list[SourceEntity]] = {}
    for ent in to_link:
        by_type.setdefault(_entity_type(ent, config), []).append(ent)
    for etype in sorted(by_type):
        assignment = link_entities(flatten_source(by_type[etype], etype), extract_kg_view(snapshot, etype), linking_for(etype))
        id_of = assignment.id_of
        for ent in by_type[etype]:
            ids[ent.id] = id_of[ent.id]
        report.review.extend([str(a), str(b)] for a, b in assignment.review)
    existing = set(snapshot.subject_index)
    report.entities_created = len({g for g in ids.values() if g not in existing})

    # export, remap subjects and source-internal references, resolve literal objects
    resolvable = config.pgf.resolvable
    if resolvable and nerd_view is None:
        nerd_view = build_entity_view(snapshot, importance)
    ref_preds = config.pgf.ref_predicates
    fused: list[ExtendedTriple] = []
    fused_by_subject: dict[EntityId, list[ExtendedTriple]] = {}
    payload = list(delta.updated) + list(delta.added)
    for ent in payload:
        g = ids[ent.id]
        rows = export_extended_triples([ent], src, config.default_trust, locale=config.locale, ref_predicates=ref_preds)
        mapped = []
        for t in rows:
            t = t.replace(subject=g)
            if t.object_kind is ObjectKind.ENTITY_REF and not t.object.is_graph:
                target = ids.get(t.object) or links.get(t.object)
                if target is None:
                    t = t.replace(object=t.object.local_id, object_kind=ObjectKind.LITERAL, locale=config.locale)
                else:
                    t = t.replace(object=target)
            mapped.append(t)
        mapped, n = _resolve_objects(mapped, ent, resolvable, snapshot, nerd_view, theta_resolve)
        report.objects_resolved += n
        # relationship nodes: reuse a KG node with enough overlap
        decisions = merge_relationship_nodes(
            [t for t in snapshot.facts_of(g).values()] + fused_by_subject.get(g, []), mapped, theta_rel)
        rename = {(d.predicate, d.source_r_id): d.kg_r_id for d in decisions if d.merged}
        report.relationship_nodes_merged += len(rename)
        report.relationship_nodes_created += sum(1 for d in decisions if not d.merged)
        for t in mapped:
            if t.r_id is not None and (t.predicate, t.r_id) in rename:
                t = t.replace(r_id=rename[(t.predicate, t.r_id)])
            fused.append(t)
            fused_by_subject.setdefault(g, []).append(t)
        fused.append(ExtendedTriple(g, SAME_AS, ent.id, ObjectKind.ENTITY_REF,
                                    sources=(src,), trust=(config.default_trust,)))
    # retract what an updated entity no longer asserts, unless another entity of
    # this source also feeds the same graph entity
    keep = {t.key for t in fused}
    feeders: dict = {}
    for eid, g in list(links.items()) + list(ids.items()):
        if eid.namespace == src:
            feeders.setdefault(g, set()).add(eid)
    retract = []
    for g in sorted({ids[e.id] for e in delta.updated if e.id in ids}, key=str):
        if len(feeders.get(g, ())) > 1:
            log.warning("updated entity shares %s with other %s entities; old facts kept", g, src)
            continue
        retract += [t for t in snapshot.facts_of(g).values() if t.predicate != SAME_AS and t.key not in keep]
    u, r = _strip_entity(retract, src)
    snapshot = fuse_simple_facts(snapshot.with_changes(upserts=u, removals=r), fused)

    snapshot = apply_deletions(snapshot, delta.deleted, src)
    if config.volatile_predicates or delta.volatile_dump:
        snapshot = overwrite_volatile_partition(snapshot, src, delta.volatile_dump, config.volatile_predicates)

    functional = ontology.functional_predicates if ontology is not None else frozenset()
    table = update_source_trust(snapshot, functional_predicates=functional)
    confidence = confidence_map(snapshot, table.trust)
    added, updated, removed, touched = diff_snapshots(start, snapshot)
    if not (added or updated or removed) and dict(start.confidence) == confidence:
        snapshot = start
    else:
        snapshot = KgSnapshot._raw(snapshot._by_subject, start.version + 1, confidence)
    report.facts_added, report.facts_updated, report.facts_removed = len(added), len(updated), len(removed)
    report.trust, report.trust_iterations, report.trust_converged = table.trust, table.iteration_count, table.converged
    report.changed_entities = sorted(map(str, touched))
    log.info("fused %s: +%d ~%d -%d facts, %d new entities", src, len(added), len(updated), len(removed),
             report.entities_created)
    return snapshot, report


class SnapshotLineage:
    """Holder of the current snapshot with a single-writer lease."""

    def __init__(self, snapshot: Optional[KgSnapshot] = None):
        self.current = snapshot or KgSnapshot()
        self._lock = threading.Lock()

    @contextlib.contextmanager
    def lease(self, timeout: float = -1):
        if not self._lock.acquire(timeout=timeout):
            raise WriterBusy("another fusion holds the writer lease")
        try:
            yield self
        finally:
            self._lock.release()

    def fuse(self, delta: SourceDelta, config: SourceConfig, **kwargs) -> FusionReport:
        with self.lease():
            new, report = process_source_payloads(self.current, delta, config, **kwargs)
            self.current = new
            return report
