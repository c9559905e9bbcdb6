"""Named entity recognition and disambiguation against the KG.

The entity view keeps one summary record per graph entity (aliases, types,
description, key relationships, neighbor types, importance). Mentions are
matched to candidates by alias similarity, then each candidate is scored
independently by a logistic model; the best is accepted only above a
rejection threshold.
"""
from __future__ import annotations

import json
import math
import random
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from kgplatform.core import GRAPH_NAMESPACE, SAME_AS, EntityId, KgSnapshot, ObjectKind
from kgplatform.simstrings import StringEncoder, normalize, qgram_jaccard, qgrams

NAME_PREDICATES = ("name", "alias")
MAX_KEY_RELATIONSHIPS = 16
THETA_OBJECT_RESOLUTION = 0.9
THETA_ANNOTATION = 0.5

STOPWORDS = frozenset(
    "a an and are as at be by for from has have he her his i in is it its of on or she that the their they "
    "this to was we were what which who will with you".split()
)

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(normalize(text))


def content_tokens(text: str) -> frozenset[str]:
    return frozenset(t for t in tokens(text) if t not in STOPWORDS)


@dataclass(frozen=True)
class NerdEntityRecord:
    entity: EntityId
    names_aliases: Mapping[str, tuple[str, ...]]
    types: tuple[str, ...]
    description: Optional[str]
    key_relationships: tuple[tuple[str, str], ...]
    neighbor_types: tuple[str, ...]
    importance: float

    @property
    def aliases(self) -> list[str]:
        return sorted({a for names in self.names_aliases.values() for a in names})

    def to_record(self) -> dict:
        return {
            "entity": str(self.entity),
            "names_aliases": {k: list(v) for k, v in sorted(self.names_aliases.items())},
            "types": list(self.types),
            "description": self.description,
            "key_relationships": [list(kr) for kr in self.key_relationships],
            "neighbor_types": list(self.neighbor_types),
            "importance": self.importance,
        }


def _display_name(facts) -> Optional[str]:
    names = sorted(str(t.object) for t in facts if t.predicate == "name" and t.r_id is None)
    return names[0] if names else None


def _record(entity, snapshot: KgSnapshot, incoming: Mapping, importance: Mapping) -> Optional[NerdEntityRecord]:
    facts = list(snapshot.facts_of(entity).values())
    aliases: dict[str, set[str]] = {}
    types, desc = set(), []
    out_edges = []
    for t in facts:
        if t.predicate in NAME_PREDICATES and t.object_kind is ObjectKind.LITERAL and t.r_id is None:
            aliases.setdefault(t.locale or "und", set()).add(str(t.object))
        elif t.predicate == "type":
            types.add(str(t.object))
        elif t.predicate == "description" and t.object_kind is ObjectKind.LITERAL:
            desc.append(str(t.object))
        elif t.object_kind is ObjectKind.ENTITY_REF and t.predicate != SAME_AS:
            name = f"{t.predicate}.{t.r_predicate}" if t.r_id else t.predicate
            out_edges.append((name, t.object))
    if not aliases:
        return None
    edges = out_edges + [(f"{p}^-1", src) for p, src in incoming.get(entity, ())]
    # keep the most important neighbors
    edges = sorted(set(edges), key=lambda e: (-importance.get(e[1], 0.0), str(e[1]), e[0]))[:MAX_KEY_RELATIONSHIPS]
    rels, ntypes = [], set()
    for pred, nb in edges:
        nb_facts = list(snapshot.facts_of(nb).values())
        surface = _display_name(nb_facts) or str(nb)
        rels.append((pred, surface))
        ntypes.update(str(t.object) for t in nb_facts if t.predicate == "type")
    return NerdEntityRecord(
        entity=entity,
        names_aliases={k: tuple(sorted(v)) for k, v in sorted(aliases.items())},
        types=tuple(sorted(types)),
        description=" ".join(sorted(desc)) or None,
        key_relationships=tuple(sorted(rels)),
        neighbor_types=tuple(sorted(ntypes)),
        importance=float(importance.get(entity, 0.0)),
    )


def incoming_edges(snapshot: KgSnapshot) -> dict:
    out: dict = {}
    for t in snapshot:
        if t.object_kind is ObjectKind.ENTITY_REF and t.predicate != SAME_AS and t.subject.is_graph:
            name = f"{t.predicate}.{t.r_predicate}" if t.r_id else t.predicate
            out.setdefault(t.object, set()).add((name, t.subject))
    return out


def neighbors(snapshot: KgSnapshot, entity: EntityId, incoming: Mapping) -> set:
    nbrs = {t.object for t in snapshot.facts_of(entity).values()
            if t.object_kind is ObjectKind.ENTITY_REF and t.predicate != SAME_AS}
    nbrs.update(src for _, src in incoming.get(entity, ()))
    return nbrs


@dataclass
class NerdView:
    records: dict[EntityId, NerdEntityRecord]
    _alias_index: dict = field(default_factory=dict, repr=False)
    _gram_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._alias_index.clear()
        self._gram_index.clear()
        for rec in self.records.values():
            for alias in rec.aliases:
                key = normalize(alias)
                self._alias_index.setdefault(key, set()).add(rec.entity)
                for g in qgrams(key, 3):
                    self._gram_index.setdefault(g, set()).add(rec.entity)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, NerdView) and self.records == other.records

    def exact(self, alias: str) -> set:
        return set(self._alias_index.get(normalize(alias), ()))

    def alias_keys(self):
        return self._alias_index.keys()

    def pool(self, surface: str) -> set:
        out = set()
        for g in qgrams(normalize(surface), 3):
            out |= self._gram_index.get(g, set())
        return out

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in sorted(self.records, key=str):
                fh.write(json.dumps(self.records[e].to_record(), sort_keys=True) + "\n")


def build_entity_view(snapshot: KgSnapshot, importance: Optional[Mapping] = None) -> NerdView:
    importance = importance or {}
    incoming = incoming_edges(snapshot)
    records = {}
    for e in snapshot.subjects():
        if e.namespace != GRAPH_NAMESPACE:
            continue
        rec = _record(e, snapshot, incoming, importance)
        if rec is not None:
            records[e] = rec
    return NerdView(records)


def refresh_entity_view(view: NerdView, old: KgSnapshot, new: KgSnapshot, changed: Iterable[EntityId],
                        importance: Optional[Mapping] = None, old_importance: Optional[Mapping] = None) -> NerdView:
    """Recompute only records that can differ: changed entities, their old and
    new neighbors, and entities whose neighbors' importance or name moved."""
    importance = importance or {}
    old_importance = old_importance if old_importance is not None else importance
    inc_old, inc_new = incoming_edges(old), incoming_edges(new)
    seeds = set(changed)
    seeds |= {e for e in set(importance) | set(old_importance) if importance.get(e, 0.0) != old_importance.get(e, 0.0)}
    dirty = set(seeds)
    for e in seeds:
        dirty |= neighbors(old, e, inc_old) | neighbors(new, e, inc_new)
    records = dict(view.records)
    for e in dirty:
        records.pop(e, None)
        if e.namespace == GRAPH_NAMESPACE and e in new.subject_index:
            rec = _record(e, new, inc_new, importance)
            if rec is not None:
                records[e] = rec
    return NerdView(records)


# -- retrieval --------------------------------------------------------------------

@dataclass(frozen=True)
class Mention:
    surface: str
    context_tokens: frozenset = frozenset()
    type_hint: Optional[str] = None

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("empty mention")


@dataclass(frozen=True)
class Candidate:
    entity: EntityId
    alias_score: float
    importance: float


def alias_similarity(a: str, b: str, encoder: Optional[StringEncoder] = None) -> float:
    a, b = normalize(a), normalize(b)
    if a == b:
        return 1.0
    if encoder is not None:
        return max(0.0, encoder.similarity(a, b))
    return qgram_jaccard(a, b, 3)


def retrieve_candidates(view: NerdView, mention: Mention, k: int = 10, encoder: Optional[StringEncoder] = None,
                        budget: Optional[int] = None, min_score: float = 0.0) -> list[Candidate]:
    """Top-k by alias similarity; ties (and the comparison budget) ordered by importance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = [view.records[e] for e in view.pool(mention.surface)]
    if mention.type_hint is not None:
        pool = [r for r in pool if mention.type_hint in r.types]
    if budget is not None:
        pool = sorted(pool, key=lambda r: (-r.importance, str(r.entity)))[:budget]
    scored = []
    for r in pool:
        s = max(alias_similarity(mention.surface, a, encoder) for a in r.aliases)
        if s > min_score:
            scored.append(Candidate(r.entity, s, r.importance))
    scored.sort(key=lambda c: (-c.alias_score, -c.importance, str(c.entity)))
    return scored[:k]


# -- disambiguation -----------------------------------------------------------------

FEATURES = ("alias_sim", "ctx_rel", "ctx_type", "type_compat", "log_importance")


@dataclass
class DisambiguationWeights:
    weights: dict = field(default_factory=lambda: {
        "alias_sim": 4.0, "ctx_rel": 6.0, "ctx_type": 2.0, "type_compat": 1.0, "log_importance": 2.0,
    })
    bias: float = -4.0
    theta_reject: float = THETA_ANNOTATION

    def vector(self) -> np.ndarray:
        return np.array([self.weights.get(f, 0.0) for f in FEATURES])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({**self.weights, "bias": self.bias, "theta_reject": self.theta_reject},
                                         indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DisambiguationWeights":
        d = json.loads(Path(path).read_text())
        bias = float(d.pop("bias"))
        theta = float(d.pop("theta_reject", THETA_ANNOTATION))
        return cls({k: float(v) for k, v in d.items()}, bias, theta)


def _saturate(c: int) -> float:
    return c / (c + 1.0)


def candidate_features(mention: Mention, cand: Candidate, rec: NerdEntityRecord) -> np.ndarray:
    ctx = mention.context_tokens
    rel_tokens = set()
    for pred, surface in rec.key_relationships:
        rel_tokens |= content_tokens(surface)
    type_tokens = set()
    for t in rec.neighbor_types + rec.types:
        type_tokens |= content_tokens(t.replace("_", " "))
    if rec.description:
        type_tokens |= content_tokens(rec.description)
    return np.array([
        cand.alias_score,
        _saturate(len(ctx & rel_tokens)),
        _saturate(len(ctx & type_tokens)),
        1.0 if mention.type_hint is not None and mention.type_hint in rec.types else 0.0,
        math.log1p(max(0.0, rec.importance)) / math.log(2.0),
    ])


@dataclass(frozen=True)
class DisambiguationResult:
    outcome: Optional[EntityId]  # None means REJECT
    confidence: float
    per_candidate_scores: tuple[tuple[EntityId, float], ...] = ()

    @property
    def rejected(self) -> bool:
        return self.outcome is None


def disambiguate(mention: Mention, candidates: list[Candidate], view: NerdView,
                 weights: Optional[DisambiguationWeights] = None,
                 theta_reject: Optional[float] = None) -> DisambiguationResult:
    """One-vs-all logistic scoring; REJECT unless the best score reaches theta."""
    weights = weights or DisambiguationWeights()
    theta = weights.theta_reject if theta_reject is None else theta_reject
    if not candidates:
        return DisambiguationResult(None, 0.0, ())
    w = weights.vector()
    scores = []
    for c in candidates:
        z = weights.bias + float(w @ candidate_features(mention, c, view.records[c.entity]))
        scores.append((c.entity, 1.0 / (1.0 + math.exp(-z))))
    # equal scores keep retrieval order
    best_entity, best = scores[0]
    for e, s in scores[1:]:
        if s > best:
            best_entity, best = e, s
    if best < theta:
        return DisambiguationResult(None, best, tuple(scores))
    return DisambiguationResult(best_entity, best, tuple(scores))


def subject_context(snapshot: KgSnapshot, subject: EntityId, exclude: str = "") -> frozenset:
    """Tokens of a subject's other facts; referenced entities contribute their names."""
    out: set = set()
    for t in snapshot.facts_of(subject).values():
        if t.predicate == SAME_AS:
            continue
        if t.object_kind is ObjectKind.ENTITY_REF:
            name = _display_name(snapshot.facts_of(t.object).values())
            if name:
                out |= content_tokens(name)
        elif str(t.object) != exclude and t.predicate != "type":
            out |= content_tokens(str(t.object))
    return frozenset(out)


def resolve_object(snapshot: KgSnapshot, view: NerdView, literal: str, context: Iterable[str] = (),
                   expected_type: Optional[str] = None, weights: Optional[DisambiguationWeights] = None,
                   theta_reject: float = THETA_OBJECT_RESOLUTION, k: int = 10,
                   encoder: Optional[StringEncoder] = None) -> Optional[EntityId]:
    ctx = frozenset(context) - content_tokens(literal)
    mention = Mention(literal, ctx, expected_type)
    cands = retrieve_candidates(view, mention, k, encoder)
    return disambiguate(mention, cands, view, weights, theta_reject).outcome


@dataclass(frozen=True)
class Annotation:
    start: int
    end: int
    surface: str
    entity: EntityId
    confidence: float

    def to_record(self) -> dict:
        return {"start": self.start, "end": self.end, "surface": self.surface,
                "entity": str(self.entity), "confidence": self.confidence}


def annotate_text(text: str, view: NerdView, theta_reject: float = THETA_ANNOTATION,
                  weights: Optional[DisambiguationWeights] = None, k: int = 10) -> list[Annotation]:
    """Longest-match alias scan; each hit disambiguated with the other sentence tokens as context."""
    spans = [(m.start(), m.end(), m.group(0)) for m in _TOKEN.finditer(text)]
    words = [normalize(w) for _, _, w in spans]
    aliases = {tuple(tokens(a)) for a in view.alias_keys()}
    aliases.discard(())
    max_len = max((len(a) for a in aliases), default=0)
    all_tokens = frozenset(w for w in words if w not in STOPWORDS)
    out, i = [], 0
    while i < len(words):
        hit = 0
        for n in range(min(max_len, len(words) - i), 0, -1):
            cand = tuple(words[i:i + n])
            if cand in aliases and not all(w in STOPWORDS for w in cand):
                hit = n
                break
        if not hit:
            i += 1
            continue
        start, end = spans[i][0], spans[i + hit - 1][1]
        surface = text[start:end]
        mention = Mention(surface, all_tokens - set(words[i:i + hit]))
        res = disambiguate(mention, retrieve_candidates(view, mention, k), view, weights, theta_reject)
        if not res.rejected:
            out.append(Annotation(start, end, surface, res.outcome, res.confidence))
        i += hit
    return out


# -- weight fitting on template snippets ---------------------------------------------

def generate_snippets(view: NerdView, n: int = 500, seed: int = 0, k: int = 5):
    """Template mentions: an alias of the entity plus surfaces of some of its
    key relationships as context. Yields (feature matrix, labels) groups."""
    rng = random.Random(seed)
    entities = sorted(view.records, key=str)
    groups = []
    for _ in range(n):
        rec = view.records[rng.choice(entities)]
        alias = rng.choice(rec.aliases)
        ctx: set = set()
        rels = list(rec.key_relationships)
        for _, surface in rng.sample(rels, min(len(rels), rng.randint(0, 2))):
            ctx |= content_tokens(surface)
        if rng.random() < 0.3 and rec.types:
            ctx |= content_tokens(rng.choice(rec.types))
        mention = Mention(alias, frozenset(ctx) - content_tokens(alias))
        cands = retrieve_candidates(view, mention, k)
        if not any(c.entity == rec.entity for c in cands):
            continue
        X = np.array([candidate_features(mention, c, view.records[c.entity]) for c in cands])
        y = np.array([1.0 if c.entity == rec.entity else 0.0 for c in cands])
        groups.append((X, y))
    return groups


def fit_weights(groups, l2: float = 1e-2, lr: float = 0.5, iters: int = 2000,
                theta_reject: float = THETA_ANNOTATION) -> DisambiguationWeights:
    X = np.vstack([g[0] for g in groups])
    y = np.concatenate([g[1] for g in groups])
    Xb = np.hstack([np.ones((len(X), 1)), X])
    w = np.zeros(Xb.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(Xb @ w)))
        grad = Xb.T @ (p - y) / len(y) + l2 * np.r_[0.0, w[1:]]
        w -= lr * grad
    return DisambiguationWeights(dict(zip(FEATURES, map(float, w[1:]))), float(w[0]), theta_reject)
