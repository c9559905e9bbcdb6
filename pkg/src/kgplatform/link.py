"""Dedup and subject linking over a combined source + KG payload.

blocking -> pair generation -> calibrated matching -> signed linkage graph
-> pivot correlation clustering -> at-most-one-graph-entity repair.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import math
import zlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from kgplatform.core import GRAPH_NAMESPACE, SAME_AS, EntityId, KgError, KgSnapshot, ObjectKind
from kgplatform.ingest import SourceEntity
from kgplatform.simstrings import (
    StringEncoder,
    edit_similarity,
    normalize,
    qgram_jaccard,
    qgrams,
    token_jaccard,
)

log = logging.getLogger(__name__)


class LinkError(KgError):
    pass


class MissingFeaturePredicate(LinkError):
    pass


class ThresholdOrder(LinkError, ValueError):
    pass


@dataclass
class LinkEntity:
    id: EntityId
    predicates: dict[str, list[str]]
    is_graph_entity: bool = False


@dataclass
class LinkingPayload:
    entities: list[LinkEntity]
    entity_type: Optional[str] = None

    def __post_init__(self):
        for e in self.entities:
            if e.is_graph_entity and e.id.namespace != GRAPH_NAMESPACE:
                raise LinkError(f"graph entity {e.id} outside the {GRAPH_NAMESPACE!r} namespace")

    @property
    def by_id(self) -> dict[EntityId, LinkEntity]:
        return {e.id: e for e in self.entities}

    @property
    def schema(self) -> set[str]:
        return {p for e in self.entities for p in e.predicates}

    @property
    def graph_ids(self) -> set[EntityId]:
        return {e.id for e in self.entities if e.is_graph_entity}

    def combine(self, other: "LinkingPayload") -> "LinkingPayload":
        return LinkingPayload(self.entities + other.entities, self.entity_type or other.entity_type)


def flatten_source(entities: Iterable[SourceEntity], entity_type: Optional[str] = None) -> LinkingPayload:
    out = []
    for e in entities:
        preds: dict[str, list[str]] = {}
        for p, values in e.predicates.items():
            for v in values:
                if isinstance(v, dict):
                    for k, x in v.items():
                        preds.setdefault(f"{p}.{k}", []).append(str(x))
                else:
                    preds.setdefault(p, []).append(str(v))
        out.append(LinkEntity(e.id, preds, False))
    return LinkingPayload(out, entity_type)


def extract_kg_view(snapshot: KgSnapshot, entity_type: str) -> LinkingPayload:
    """All graph entities typed ``entity_type``, flattened to predicate -> values."""
    out = []
    for subject, facts in snapshot.subject_index.items():
        if subject.namespace != GRAPH_NAMESPACE:
            continue
        if not any(t.predicate == "type" and str(t.object) == entity_type for t in facts.values()):
            continue
        preds: dict[str, list[str]] = {}
        for t in sorted(facts.values(), key=lambda t: t.key):
            if t.predicate == SAME_AS:
                continue
            name = f"{t.predicate}.{t.r_predicate}" if t.r_id else t.predicate
            preds.setdefault(name, []).append(str(t.object))
        out.append(LinkEntity(subject, preds, True))
    out.sort(key=lambda e: str(e.id))
    return LinkingPayload(out, entity_type)


# -- blocking ------------------------------------------------------------------------

_PRIME = (1 << 31) - 1


@dataclass
class BlockingFunction:
    kind: str
    predicate: Optional[str] = None
    q: int = 3
    length: int = 4
    bands: int = 20
    rows: int = 2
    seed: int = 0
    parts: list["BlockingFunction"] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("exact", "prefix", "token", "qgram_minhash", "composite"):
            raise LinkError(f"unknown blocking function {self.kind!r}")
        if self.kind == "qgram_minhash":
            rng = np.random.default_rng(self.seed)
            n = self.bands * self.rows
            self._a = rng.integers(1, _PRIME, n, dtype=np.int64)
            self._b = rng.integers(0, _PRIME, n, dtype=np.int64)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockingFunction":
        d = dict(d)
        kind = d.pop("name", None) or d.pop("kind")
        parts = [cls.from_dict(p) for p in d.pop("parts", [])]
        return cls(kind=kind, parts=parts, **d)

    def _minhash_keys(self, value: str) -> list[tuple]:
        grams = qgrams(value, self.q)
        if not grams:
            return []
        x = np.array([zlib.crc32(g.encode("utf-8")) for g in sorted(grams)], dtype=np.int64)
        sig = ((np.outer(self._a, x) + self._b[:, None]) % _PRIME).min(axis=1)
        sig = sig.reshape(self.bands, self.rows)
        return [("mh", band, tuple(int(v) for v in sig[band])) for band in range(self.bands)]

    def keys(self, entity: LinkEntity) -> list[tuple]:
        if self.kind == "composite":
            per_part = [p.keys(entity) for p in self.parts]
            return [tuple(combo) for combo in itertools.product(*per_part)]
        keys: list[tuple] = []
        for raw in entity.predicates.get(self.predicate, []):
            value = normalize(raw)
            if not value:
                continue
            if self.kind == "exact":
                keys.append(("eq", value))
            elif self.kind == "prefix":
                keys.append(("pre", value[: self.length]))
            elif self.kind == "token":
                keys.extend(("tok", tok) for tok in value.split())
            else:
                keys.extend(self._minhash_keys(value))
        return list(dict.fromkeys(keys))


def block(payload: LinkingPayload, cfg: Sequence[BlockingFunction]) -> list[frozenset[EntityId]]:
    """Union of buckets over all blocking functions; singleton buckets dropped."""
    if not cfg:
        raise LinkError("at least one blocking function is required")
    buckets: dict[tuple, set[EntityId]] = {}
    for i, fn in enumerate(cfg):
        for ent in payload.entities:
            for key in fn.keys(ent):
                buckets.setdefault((i, key), set()).add(ent.id)
    blocks = {frozenset(members) for members in buckets.values() if len(members) > 1}
    return sorted(blocks, key=lambda b: sorted(map(str, b)))


def _pair(a: EntityId, b: EntityId) -> tuple[EntityId, EntityId]:
    return (a, b) if str(a) < str(b) else (b, a)


def generate_pairs(blocks: Iterable[Iterable[EntityId]], *, skip_graph_pairs: bool = False) -> list[tuple[EntityId, EntityId]]:
    pairs = set()
    for members in blocks:
        ordered = sorted(members, key=str)
        for a, b in itertools.combinations(ordered, 2):
            if skip_graph_pairs and a.is_graph and b.is_graph:
                continue
            pairs.add(_pair(a, b))
    return sorted(pairs, key=lambda p: (str(p[0]), str(p[1])))


# -- matching ------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredPair:
    left: EntityId
    right: EntityId
    probability: float

    def __post_init__(self):
        if self.left == self.right:
            raise LinkError("self pair")
        if str(self.left) > str(self.right):
            left, right = self.right, self.left
            object.__setattr__(self, "left", left)
            object.__setattr__(self, "right", right)


def _exact(a: str, b: str) -> float:
    return 1.0 if a == b else 0.0


def _numeric(a: str, b: str) -> float:
    try:
        return 1.0 if float(a) == float(b) else 0.0
    except ValueError:
        return _exact(a, b)


COMPARATORS: dict[str, Callable[[str, str], float]] = {
    "exact": _exact,
    "numeric": _numeric,
    "qgram_jaccard": lambda a, b: qgram_jaccard(a, b, 3),
    "edit": edit_similarity,
    "token_jaccard": token_jaccard,
}


@dataclass
class Feature:
    predicate: str
    comparator: str
    weight: float
    threshold: float = 0.5


@dataclass
class MatchingModel:
    """``logistic``: sigmoid(bias + sum w_i f_i) over raw similarities.
    ``rule``: the same but each similarity is first cut at its threshold."""

    kind: str
    features: list[Feature]
    bias: float
    encoders: dict[str, StringEncoder] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: Mapping, encoders: Optional[Mapping[str, StringEncoder]] = None) -> "MatchingModel":
        feats = [Feature(f["predicate"], f["comparator"], float(f["weight"]), float(f.get("threshold", 0.5)))
                 for f in d["features"]]
        return cls(d.get("kind", "logistic"), feats, float(d["bias"]), dict(encoders or {}))

    @classmethod
    def load(cls, path, encoders=None) -> "MatchingModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), encoders)

    def comparator(self, name: str) -> Callable[[str, str], float]:
        if name.startswith("learned"):
            _, _, string_type = name.partition(":")
            enc = self.encoders.get(string_type or "default")
            if enc is None:
                raise LinkError(f"no encoder for comparator {name!r}")
            return lambda a, b: max(0.0, enc.similarity(a, b))
        try:
            return COMPARATORS[name]
        except KeyError:
            raise LinkError(f"unknown comparator {name!r}") from None

    def feature_values(self, a: LinkEntity, b: LinkEntity) -> list[float]:
        out = []
        for f in self.features:
            cmp = self.comparator(f.comparator)
            va = [normalize(v) for v in a.predicates.get(f.predicate, []) if normalize(v)]
            vb = [normalize(v) for v in b.predicates.get(f.predicate, []) if normalize(v)]
            out.append(max((cmp(x, y) for x in va for y in vb), default=0.0))
        return out

    def probability(self, a: LinkEntity, b: LinkEntity) -> float:
        z = self.bias
        for f, v in zip(self.features, self.feature_values(a, b)):
            if self.kind == "rule":
                v = 1.0 if v >= f.threshold else 0.0
            z += f.weight * v
        return 1.0 / (1.0 + math.exp(-z))


def match_pairs(pairs: Iterable[tuple[EntityId, EntityId]], payload: LinkingPayload, model: MatchingModel) -> list[ScoredPair]:
    schema = payload.schema
    missing = sorted({f.predicate for f in model.features} - schema)
    if missing and payload.entities:
        raise MissingFeaturePredicate(", ".join(missing))
    ents = payload.by_id
    return [ScoredPair(a, b, model.probability(ents[a], ents[b])) for a, b in pairs]


# -- linkage graph + clustering ------------------------------------------------------------

@dataclass
class LinkageGraph:
    nodes: frozenset
    edges: dict = field(default_factory=dict)  # (a, b) with str(a) < str(b) -> +1 / -1
    weights: dict = field(default_factory=dict)  # same keys -> match probability

    def __post_init__(self):
        for a, b in self.edges:
            if a == b:
                raise LinkError(f"self edge on {a}")
            if a not in self.nodes or b not in self.nodes:
                raise LinkError(f"edge ({a}, {b}) references an unknown node")

    def sign(self, a, b) -> int:
        return self.edges.get(_pair(a, b), 0)

    def positive_neighbors(self) -> dict:
        nbrs = {n: set() for n in self.nodes}
        for (a, b), s in self.edges.items():
            if s > 0:
                nbrs[a].add(b)
                nbrs[b].add(a)
        return nbrs


def build_linkage_graph(scored: Iterable[ScoredPair], tau_pos: float = 0.9, tau_neg: float = 0.1,
                        nodes: Iterable = ()) -> LinkageGraph:
    if not (0.0 <= tau_neg < tau_pos <= 1.0):
        raise ThresholdOrder(f"need 0 <= tau_neg < tau_pos <= 1, got {tau_neg}, {tau_pos}")
    all_nodes = set(nodes)
    edges, weights = {}, {}
    for sp in scored:
        all_nodes.update((sp.left, sp.right))
        key = (sp.left, sp.right)
        if sp.probability >= tau_pos:
            edges[key] = 1
        elif sp.probability <= tau_neg:
            edges[key] = -1
        else:
            continue
        weights[key] = sp.probability
    return LinkageGraph(frozenset(all_nodes), edges, weights)


def pivot_clustering(g: LinkageGraph, seed: int = 0) -> list[frozenset]:
    """Random-order pivot: each unclustered pivot absorbs its unclustered + neighbors."""
    order = sorted(g.nodes, key=str)
    np.random.default_rng(seed).shuffle(order)
    nbrs = g.positive_neighbors()
    done: set = set()
    clusters = []
    for pivot in order:
        if pivot in done:
            continue
        members = {pivot} | (nbrs[pivot] - done)
        done |= members
        clusters.append(frozenset(members))
    return clusters


def disagreements(g: LinkageGraph, clusters: Iterable[Iterable]) -> int:
    label = {n: i for i, c in enumerate(clusters) for n in c}
    bad = 0
    for (a, b), s in g.edges.items():
        same = label[a] == label[b]
        bad += (s > 0 and not same) or (s < 0 and same)
    return bad


def local_search(g: LinkageGraph, clusters: Sequence[Iterable], max_passes: int = 50) -> list[frozenset]:
    """Greedy refinement: move single nodes, then merge cluster pairs, while
    either strictly lowers the disagreement count."""
    order = sorted(g.nodes, key=str)
    index = {n: i for i, n in enumerate(order)}
    label = [0] * len(order)
    for k, c in enumerate(clusters):
        for n in c:
            label[index[n]] = k
    edges = [(index[a], index[b], s) for (a, b), s in g.edges.items()]
    adj: list[list] = [[] for _ in order]
    for a, b, s in edges:
        adj[a].append((b, s))
        adj[b].append((a, s))
    members: dict = {}
    for i in range(len(order)):
        members.setdefault(label[i], set()).add(i)
    next_label = len(clusters)

    def move(i, k):
        members[label[i]].discard(i)
        members.setdefault(k, set()).add(i)
        label[i] = k

    for _ in range(max_passes):
        improved = False
        for node in range(len(order)):
            pos = sum(1 for _, s in adj[node] if s > 0)
            score: dict = {}
            for nb, s in adj[node]:
                score[label[nb]] = score.get(label[nb], 0) + (1 if s > 0 else -1)
            here = label[node]
            # cost in cluster k = pos - pos_k + neg_k = pos - score[k]
            best_k, best_cost = here, pos - score.get(here, 0)
            for k in sorted(score):
                if pos - score[k] < best_cost:
                    best_k, best_cost = k, pos - score[k]
            if pos < best_cost and len(members[here]) > 1:
                best_k, best_cost = next_label, pos
                next_label += 1
            if best_k != here:
                move(node, best_k)
                improved = True
        between: dict = {}
        for a, b, s in edges:
            la, lb = label[a], label[b]
            if la != lb:
                key = (min(la, lb), max(la, lb))
                between[key] = between.get(key, 0) + (1 if s > 0 else -1)
        merged: set = set()
        for (la, lb), gain in sorted(between.items(), key=lambda kv: (-kv[1], kv[0])):
            if gain <= 0 or la in merged or lb in merged:
                continue
            for i in list(members.get(lb, ())):
                move(i, la)
            merged.update((la, lb))
            improved = True
        if not improved:
            break
    groups: dict = {}
    for i, n in enumerate(order):
        groups.setdefault(label[i], set()).add(n)
    return [frozenset(v) for v in groups.values()]


def best_pivot_clustering(g: LinkageGraph, seeds: Iterable[int], refine: bool = True) -> list[frozenset]:
    best, best_cost = None, None
    for seed in seeds:
        c = pivot_clustering(g, seed)
        if refine:
            c = local_search(g, c)
        cost = disagreements(g, c)
        if best_cost is None or cost < best_cost:
            best, best_cost = c, cost
    return best


def mint_entity_id(members: Iterable[EntityId]) -> EntityId:
    anchor = min(str(m) for m in members)
    return EntityId(GRAPH_NAMESPACE, hashlib.blake2b(anchor.encode("utf-8"), digest_size=6).hexdigest())


@dataclass
class ClusterAssignment:
    clusters: list[frozenset]
    ids: list[EntityId]
    same_as: list[tuple[EntityId, EntityId]]
    # graph entities the clustering put together; split apart and left for review
    review: list[tuple[EntityId, EntityId]] = field(default_factory=list)

    @property
    def id_of(self) -> dict:
        return {n: self.ids[i] for i, c in enumerate(self.clusters) for n in c}


def _widest_paths(g_nbrs, weights, start, allowed: set, blocked: set) -> dict:
    """Max-bottleneck strength from ``start`` over + edges, not passing through ``blocked``."""
    best = {start: 1.0}
    heap = [(-1.0, str(start), start)]
    while heap:
        neg, _, node = heapq.heappop(heap)
        strength = -neg
        if strength < best.get(node, 0.0):
            continue
        if node in blocked and node != start:
            continue
        for nb in g_nbrs[node]:
            if nb not in allowed:
                continue
            w = min(strength, weights.get(_pair(node, nb), 1.0))
            if w > best.get(nb, 0.0):
                best[nb] = w
                heapq.heappush(heap, (-w, str(nb), nb))
    return best


def _repair(cluster: frozenset, graph_nodes: list, nbrs, weights) -> list[set]:
    blocked = set(graph_nodes)
    strengths = {gid: _widest_paths(nbrs, weights, gid, set(cluster), blocked) for gid in graph_nodes}
    groups = {gid: {gid} for gid in graph_nodes}
    orphans = set()
    for node in sorted(cluster - blocked, key=str):
        scored = [(strengths[gid].get(node, 0.0), gid) for gid in graph_nodes]
        top = max(s for s, _ in scored)
        if top <= 0.0:
            orphans.add(node)
            continue
        winner = min((gid for s, gid in scored if s == top), key=str)
        groups[winner].add(node)
    parts = [groups[g] for g in sorted(groups, key=str)]
    if orphans:
        parts.append(orphans)
    return parts


def resolve_clusters(g: LinkageGraph, payload: Optional[LinkingPayload] = None, seed: int = 0,
                     trials: int = 1, refine: bool = True) -> ClusterAssignment:
    if payload is not None:
        graph_ids = payload.graph_ids
    else:
        graph_ids = {n for n in g.nodes if n.is_graph}
    raw = best_pivot_clustering(g, range(seed, seed + max(1, trials)), refine)
    nbrs = g.positive_neighbors()
    clusters, review = [], []
    for c in raw:
        gnodes = sorted((n for n in c if n in graph_ids), key=str)
        if len(gnodes) <= 1:
            clusters.append(frozenset(c))
            continue
        review.extend(itertools.combinations(gnodes, 2))
        clusters.extend(frozenset(part) for part in _repair(c, gnodes, nbrs, g.weights))
    clusters.sort(key=lambda c: min(map(str, c)))
    ids, same_as = [], []
    for c in clusters:
        gnodes = [n for n in c if n in graph_ids]
        cid = gnodes[0] if gnodes else mint_entity_id(c)
        ids.append(cid)
        same_as.extend((n, cid) for n in sorted(c, key=str) if n not in graph_ids)
    if review:
        log.warning("linking grouped %d graph-entity pairs; split and flagged for review", len(review))
    return ClusterAssignment(clusters, ids, same_as, review)


# -- end-to-end linking for one entity type ---------------------------------------------------

@dataclass
class LinkingConfig:
    blocking: list[BlockingFunction]
    model: MatchingModel
    tau_pos: float = 0.9
    tau_neg: float = 0.1
    trials: int = 11
    seed: int = 0
    skip_graph_pairs: bool = False
    refine: bool = True

    @classmethod
    def from_dict(cls, d: Mapping, encoders=None, **overrides) -> "LinkingConfig":
        if not d:
            return default_linking_config(**overrides)
        model = d.get("model")
        if isinstance(model, str):
            model = MatchingModel.load(model, encoders)
        elif model is not None:
            model = MatchingModel.from_dict(model, encoders)
        else:
            model = default_linking_config().model
        params = dict(
            blocking=[BlockingFunction.from_dict(b) for b in d.get("blocking", [])] or default_linking_config().blocking,
            model=model,
            tau_pos=float(d.get("tau_pos", 0.9)),
            tau_neg=float(d.get("tau_neg", 0.1)),
            trials=int(d.get("trials", 11)),
            seed=int(d.get("seed", 0)),
            skip_graph_pairs=bool(d.get("skip_graph_pairs", False)),
            refine=bool(d.get("refine", True)),
        )
        params.update(overrides)
        return cls(**params)


def default_linking_config(name_predicate: str = "name", **overrides) -> LinkingConfig:
    cfg = LinkingConfig(
        blocking=[BlockingFunction("exact", name_predicate), BlockingFunction("qgram_minhash", name_predicate)],
        model=MatchingModel("logistic", [Feature(name_predicate, "qgram_jaccard", 20.0)], bias=-10.0),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def link_entities(source: LinkingPayload, kg_view: LinkingPayload, cfg: LinkingConfig) -> ClusterAssignment:
    payload = kg_view.combine(source)
    blocks = block(payload, cfg.blocking)
    pairs = generate_pairs(blocks, skip_graph_pairs=cfg.skip_graph_pairs)
    scored = match_pairs(pairs, payload, cfg.model) if pairs else []
    graph = build_linkage_graph(scored, cfg.tau_pos, cfg.tau_neg, nodes=[e.id for e in payload.entities])
    return resolve_clusters(graph, payload, seed=cfg.seed, trials=cfg.trials, refine=cfg.refine)
