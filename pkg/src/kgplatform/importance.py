"""Entity importance: degrees, identities, PageRank, and their aggregate."""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from kgplatform.core import GRAPH_NAMESPACE, SAME_AS, EntityId, KgSnapshot, ObjectKind

METRICS = ("in_degree", "out_degree", "identities", "pagerank")


@dataclass(frozen=True)
class ImportanceRecord:
    entity: EntityId
    in_degree: int
    out_degree: int
    identities: int
    pagerank: float
    aggregate: float

    def to_record(self) -> dict:
        d = asdict(self)
        d["entity"] = str(self.entity)
        return d


def pagerank(n: int, edges: np.ndarray, damping: float = 0.85, tol: float = 1e-9,
             max_iter: int = 10_000) -> np.ndarray:
    """Power iteration with uniform teleport; dangling mass is spread uniformly.

    ``edges`` is an (m, 2) array of (src, dst) indices; parallel edges add weight.
    Stops when the L1 change drops below ``tol``.
    """
    if n == 0:
        return np.zeros(0)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    out_deg = np.bincount(edges[:, 0], minlength=n).astype(float)
    dangling = out_deg == 0
    w = np.zeros(len(edges)) if len(edges) == 0 else 1.0 / out_deg[edges[:, 0]]
    p = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        flow = np.bincount(edges[:, 1], weights=p[edges[:, 0]] * w, minlength=n) if len(edges) else np.zeros(n)
        new = damping * (flow + p[dangling].sum() / n) + (1.0 - damping) / n
        new /= new.sum()
        if np.abs(new - p).sum() < tol:
            return new
        p = new
    return p


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def compute_importance(snapshot: KgSnapshot, damping: float = 0.85, tol: float = 1e-9) -> dict[EntityId, ImportanceRecord]:
    """Metrics over graph entities; edges are entity_ref facts other than same_as."""
    nodes = set()
    edges = []
    identities: dict = {}
    for subject, facts in snapshot.subject_index.items():
        if subject.namespace != GRAPH_NAMESPACE:
            continue
        nodes.add(subject)
        identities[subject] = len({s for t in facts.values() for s in t.sources})
        for t in facts.values():
            if t.object_kind is ObjectKind.ENTITY_REF and t.predicate != SAME_AS and t.object.is_graph:
                nodes.add(t.object)
                edges.append((subject, t.object))
    order = sorted(nodes)
    if not order:
        return {}
    idx = {e: i for i, e in enumerate(order)}
    arr = np.array([(idx[a], idx[b]) for a, b in edges], dtype=np.int64).reshape(-1, 2)
    n = len(order)
    indeg = np.bincount(arr[:, 1], minlength=n)
    outdeg = np.bincount(arr[:, 0], minlength=n)
    ident = np.array([identities.get(e, 0) for e in order])
    pr = pagerank(n, arr, damping, tol)
    agg = aggregate_scores(np.vstack([indeg, outdeg, ident, pr]).T)
    return {
        e: ImportanceRecord(e, int(indeg[i]), int(outdeg[i]), int(ident[i]), float(pr[i]), float(agg[i]))
        for i, e in enumerate(order)
    }


def aggregate_scores(metrics: np.ndarray) -> np.ndarray:
    """Mean over columns of min-max normalized metrics; a constant column contributes 0."""
    metrics = np.asarray(metrics, dtype=float)
    return np.mean([_minmax(metrics[:, j]) for j in range(metrics.shape[1])], axis=0)


def importance_table(records: Mapping[EntityId, ImportanceRecord]) -> dict[EntityId, float]:
    return {e: r.aggregate for e, r in records.items()}
