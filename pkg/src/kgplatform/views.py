"""View catalog, dependency-aware refresh planning, and the built-in view procedures.

A view names its dependencies and the store kind it materializes into. Its
create, update and drop procedures are looked up by name in ``PROCEDURES`` so a
catalog stays plain JSON. ``update`` receives the set of changed entity ids and
the view's previous artifact; ``create`` is a full rebuild.
"""
from __future__ import annotations

import heapq
import json
import logging
import time
from collections import Counter
from collections.abc import Callable, Iterable, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from kgplatform.core import GRAPH_NAMESPACE, SAME_AS, EntityId, KgError, KgSnapshot, ObjectKind
from kgplatform.embed import EmbeddingModel, EmptyTrainingSet, TrainConfig, train, view_from_edges
from kgplatform.importance import compute_importance, importance_table
from kgplatform.nerd import NerdView, build_entity_view, refresh_entity_view
from kgplatform.oplog import STORE_KINDS
from kgplatform.simstrings import normalize

log = logging.getLogger(__name__)


class ViewError(KgError):
    pass


class UnknownDependency(ViewError):
    pass


class CycleDetected(ViewError):
    pass


class UnknownView(ViewError):
    pass


class ViewProcedureError(ViewError):
    def __init__(self, view: str, reason: str):
        super().__init__(f"view {view!r}: {reason}")
        self.view = view


@dataclass(frozen=True)
class ViewDefinition:
    name: str
    deps: tuple[str, ...] = ()
    target_store: str = "analytics"
    create: str = ""
    update: str = ""
    drop: str = "drop"
    freshness_sla: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "deps", tuple(self.deps))
        if self.target_store not in STORE_KINDS:
            raise ViewError(f"{self.name}: unknown store kind {self.target_store!r}")
        if not self.create:
            object.__setattr__(self, "create", self.name)
        if not self.update:
            object.__setattr__(self, "update", self.create)

    def to_record(self) -> dict:
        d = asdict(self)
        d["deps"] = list(self.deps)
        return d


class ViewCatalog:
    def __init__(self, views: Iterable[ViewDefinition] = ()):
        self.views: dict[str, ViewDefinition] = {}
        for v in views:
            self.register(v)

    def __contains__(self, name: str) -> bool:
        return name in self.views

    def __getitem__(self, name: str) -> ViewDefinition:
        if name not in self.views:
            raise UnknownView(name)
        return self.views[name]

    def register(self, view: ViewDefinition) -> None:
        if view.name in view.deps:
            raise CycleDetected(f"{view.name} depends on itself")
        missing = [d for d in view.deps if d not in self.views and d != view.name]
        if missing:
            raise UnknownDependency(f"{view.name}: {missing}")
        if view.name in self.views and self._reaches(view.deps, view.name):
            raise CycleDetected(f"re-registering {view.name} closes a cycle")
        self.views[view.name] = view

    def _reaches(self, starts: Iterable[str], goal: str) -> bool:
        stack, seen = list(starts), set()
        while stack:
            v = stack.pop()
            if v == goal:
                return True
            if v not in seen:
                seen.add(v)
                stack.extend(self.views[v].deps)
        return False

    def closure(self, targets: Iterable[str]) -> set[str]:
        out: set[str] = set()
        stack = list(targets)
        while stack:
            v = stack.pop()
            if v not in out:
                out.add(self[v].name)
                stack.extend(self.views[v].deps)
        return out

    def dependents(self, name: str) -> set[str]:
        return {v.name for v in self.views.values() if name in v.deps}

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps([self.views[n].to_record() for n in sorted(self.views)], indent=1))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ViewCatalog":
        recs = json.loads(Path(path).read_text())
        cat = cls()
        pending = {r["name"]: ViewDefinition(**r) for r in recs}
        # register in an order where deps come first; leftovers mean a bad file
        while pending:
            ready = sorted(n for n, v in pending.items() if all(d in cat.views for d in v.deps))
            if not ready:
                unknown = {d for v in pending.values() for d in v.deps if d not in pending and d not in cat.views}
                raise (UnknownDependency(sorted(unknown)) if unknown else CycleDetected(sorted(pending)))
            for n in ready:
                cat.register(pending.pop(n))
        return cat


def register_view(catalog: ViewCatalog, view: ViewDefinition) -> None:
    catalog.register(view)


def plan_refresh(catalog: ViewCatalog, targets: Iterable[str]) -> list[str]:
    """Targets plus transitive deps, each once, in Kahn order with name tie-breaks."""
    needed = catalog.closure(targets)
    indeg = {v: sum(d in needed for d in catalog[v].deps) for v in needed}
    heap = [v for v, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in catalog.dependents(v) & needed:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != len(needed):
        raise CycleDetected(sorted(needed - set(order)))
    return order


# -- refresh -------------------------------------------------------------------------

@dataclass
class ViewsConfig:
    embed: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50))
    people_type: str = "person"
    name_predicates: tuple[str, ...] = ("name", "alias")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ViewsConfig":
        d = dict(d or {})
        embed = TrainConfig(**d.pop("embed", {}))
        if "name_predicates" in d:
            d["name_predicates"] = tuple(d["name_predicates"])
        return cls(embed=embed, **d)


@dataclass
class RefreshContext:
    snapshot: KgSnapshot
    deps: dict[str, Any]
    config: ViewsConfig
    prev_snapshot: Optional[KgSnapshot] = None
    # artifacts as they were before this refresh started
    prev_artifacts: dict[str, Any] = field(default_factory=dict)


@dataclass
class ViewState:
    """Materialized artifacts, the snapshot they reflect, and per-view LSNs."""

    artifacts: dict[str, Any] = field(default_factory=dict)
    snapshot: Optional[KgSnapshot] = None
    lsn: dict[str, int] = field(default_factory=dict)

    def save(self, directory: Union[str, Path], catalog: ViewCatalog) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, art in sorted(self.artifacts.items()):
            dump = PROCEDURES.get(f"{catalog[name].create}.dump", _json_dump)
            dump(art, directory / name)
        (directory / "lsn.json").write_text(json.dumps(self.lsn, sort_keys=True, indent=1))


@dataclass
class RefreshReport:
    plan: list[str]
    executions: Counter = field(default_factory=Counter)
    mode: dict[str, str] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"plan": self.plan, "executions": dict(self.executions), "mode": self.mode,
                "seconds": {k: round(v, 6) for k, v in self.seconds.items()}}


def _graph_ids(changed: Optional[Iterable]) -> Optional[frozenset[EntityId]]:
    if changed is None:
        return None
    ids = (EntityId.parse(e) for e in changed)
    return frozenset(e for e in ids if e.namespace == GRAPH_NAMESPACE)


def refresh_views(catalog: ViewCatalog, plan: list[str], snapshot: KgSnapshot, state: Optional[ViewState] = None,
                  changed_entities: Optional[Iterable] = None, config: Optional[ViewsConfig] = None,
                  lsn: Optional[int] = None) -> tuple[ViewState, RefreshReport]:
    """Run ``plan`` in order. ``changed_entities=None`` (or a view never built) means create."""
    state = state if state is not None else ViewState()
    config = config or ViewsConfig()
    changed = _graph_ids(changed_entities)
    prev_artifacts = dict(state.artifacts)
    report = RefreshReport(list(plan))
    for name in plan:
        view = catalog[name]
        ctx = RefreshContext(snapshot, {d: state.artifacts[d] for d in view.deps if d in state.artifacts},
                             config, state.snapshot, prev_artifacts)
        missing = [d for d in view.deps if d not in ctx.deps]
        if missing:
            raise ViewProcedureError(name, f"dependencies not materialized: {missing}")
        full = changed is None or name not in state.artifacts or state.snapshot is None
        proc_name = view.create if full else f"{view.update}.update"
        proc = PROCEDURES.get(proc_name)
        if proc is None:
            raise ViewProcedureError(name, f"no procedure {proc_name!r}")
        t0 = time.perf_counter()
        try:
            art = proc(ctx) if full else proc(ctx, state.artifacts[name], changed)
        except ViewProcedureError:
            raise
        except Exception as exc:
            raise ViewProcedureError(name, repr(exc)) from exc
        report.seconds[name] = time.perf_counter() - t0
        report.executions[name] += 1
        report.mode[name] = "create" if full else "update"
        state.artifacts[name] = art
        if lsn is not None:
            state.lsn[name] = lsn
        log.debug("view %s %s in %.3fs", name, report.mode[name], report.seconds[name])
    state.snapshot = snapshot
    return state, report


def drop_view(catalog: ViewCatalog, state: ViewState, name: str) -> None:
    dependents = {v for v in catalog.dependents(name) if v in state.artifacts}
    if dependents:
        raise ViewError(f"{name} still feeds {sorted(dependents)}")
    state.artifacts.pop(name, None)
    state.lsn.pop(name, None)


# -- procedures ----------------------------------------------------------------------

def _json_dump(artifact, stem: Path) -> None:
    stem.with_suffix(".json").write_text(json.dumps(artifact, sort_keys=True, ensure_ascii=False, indent=None))


def entity_feature_record(snapshot: KgSnapshot, e: EntityId, name_predicates=("name", "alias")) -> Optional[dict]:
    facts = sorted(snapshot.facts_of(e).values(), key=lambda t: t.key)
    if not facts:
        return None
    lit = lambda p: sorted({t.object for t in facts if t.predicate == p and t.object_kind is ObjectKind.LITERAL})
    names = sorted({t.object for t in facts if t.predicate in name_predicates and t.object_kind is ObjectKind.LITERAL})
    out_refs = sorted({(t.predicate, str(t.object)) for t in facts
                       if t.object_kind is ObjectKind.ENTITY_REF and t.predicate != SAME_AS
                       and t.r_id is None and t.object.is_graph})
    return {
        "name": (lit("name") or names or [""])[0],
        "names": names,
        "types": lit("type"),
        "n_facts": len(facts),
        "sources": sorted({s for t in facts for s in t.sources}),
        "out_refs": [list(r) for r in out_refs],
    }


def _features_create(ctx: RefreshContext) -> dict:
    np_ = ctx.config.name_predicates
    out = {}
    for e in ctx.snapshot.subjects():
        if e.namespace == GRAPH_NAMESPACE:
            rec = entity_feature_record(ctx.snapshot, e, np_)
            if rec is not None:
                out[str(e)] = rec
    return out


def _features_update(ctx: RefreshContext, prev: dict, changed: frozenset) -> dict:
    if not changed:
        return prev
    out = dict(prev)
    for e in changed:
        rec = entity_feature_record(ctx.snapshot, e, ctx.config.name_predicates)
        if rec is None:
            out.pop(str(e), None)
        else:
            out[str(e)] = rec
    return dict(sorted(out.items()))


def _importance_create(ctx: RefreshContext) -> dict:
    return {str(e): r.to_record() for e, r in compute_importance(ctx.snapshot).items()}


def _importance_update(ctx: RefreshContext, prev: dict, changed: frozenset) -> dict:
    # PageRank is global: any change can move every score
    return prev if not changed else _importance_create(ctx)


def _ranked_index_create(ctx: RefreshContext) -> dict:
    feats, imp = ctx.deps["entity_features"], ctx.deps["entity_importance"]
    score = lambda e: imp.get(e, {}).get("aggregate", 0.0)
    postings: dict[str, set] = {}
    for e, f in feats.items():
        for name in f["names"]:
            for tok in normalize(name).split():
                postings.setdefault(tok, set()).add(e)
    return {tok: sorted(es, key=lambda e: (-score(e), e)) for tok, es in sorted(postings.items())}


def _ranked_index_update(ctx: RefreshContext, prev: dict, changed: frozenset) -> dict:
    # scores are global (importance), so re-rank from the already-materialized deps
    return prev if not changed else _ranked_index_create(ctx)


def _neighborhood_create(ctx: RefreshContext) -> dict:
    feats = ctx.deps["entity_features"]
    out = {e: sorted(map(tuple, f["out_refs"])) for e, f in feats.items()}
    inc: dict[str, set] = {}
    for e, refs in out.items():
        for p, o in refs:
            inc.setdefault(o, set()).add((p, e))
    return {"out": {e: [list(r) for r in refs] for e, refs in sorted(out.items()) if refs},
            "in": {o: [list(r) for r in sorted(s)] for o, s in sorted(inc.items())}}


def _neighborhood_update(ctx: RefreshContext, prev: dict, changed: frozenset) -> dict:
    if not changed:
        return prev
    feats = ctx.deps["entity_features"]
    out = dict(prev["out"])
    inc = {o: {tuple(r) for r in rs} for o, rs in prev["in"].items()}
    for e in map(str, changed):
        for p, o in out.pop(e, []):
            inc[o].discard((p, e))
            if not inc[o]:
                del inc[o]
        refs = sorted(map(tuple, feats.get(e, {}).get("out_refs", [])))
        if refs:
            out[e] = [list(r) for r in refs]
            for p, o in refs:
                inc.setdefault(o, set()).add((p, e))
    return {"out": dict(sorted(out.items())),
            "in": {o: [list(r) for r in sorted(s)] for o, s in sorted(inc.items())}}


def neighborhood_edges(neigh: Mapping) -> list[tuple[str, str, str]]:
    return sorted((e, p, o) for e, refs in neigh["out"].items() for p, o in refs)


def _embeddings_create(ctx: RefreshContext) -> Optional[EmbeddingModel]:
    edges = neighborhood_edges(ctx.deps["entity_neighborhood"])
    try:
        view = view_from_edges(edges)
        if not len(view.triples):
            raise EmptyTrainingSet("no edges")
    except EmptyTrainingSet:
        return None
    return train(view, ctx.config.embed)


def _embeddings_update(ctx: RefreshContext, prev, changed: frozenset):
    # retrained from scratch: SGD from a seed is only reproducible as a whole
    return prev if not changed else _embeddings_create(ctx)


def _embeddings_dump(model: Optional[EmbeddingModel], stem: Path) -> None:
    if model is not None:
        model.save(stem.with_suffix(".kge"))


def _people_create(ctx: RefreshContext) -> dict:
    model, feats = ctx.deps["graph_embeddings"], ctx.deps["entity_features"]
    if model is None:
        return {}
    people = sorted(e for e, f in feats.items() if ctx.config.people_type in f["types"])
    idx = {str(e): i for i, e in enumerate(model.entities)}
    return {e: [round(float(x), 12) for x in model.entity_vectors[idx[e]]] for e in people if e in idx}


def _people_update(ctx: RefreshContext, prev: dict, changed: frozenset) -> dict:
    return prev if not changed else _people_create(ctx)


def _importance_floats(art: Mapping) -> dict[EntityId, float]:
    return {EntityId.parse(e): r["aggregate"] for e, r in art.items()}


def _nerd_create(ctx: RefreshContext) -> NerdView:
    return build_entity_view(ctx.snapshot, _importance_floats(ctx.deps["entity_importance"]))


def _nerd_update(ctx: RefreshContext, prev: NerdView, changed: frozenset) -> NerdView:
    if not changed:
        return prev
    old_imp = ctx.prev_artifacts.get("entity_importance")
    return refresh_entity_view(prev, ctx.prev_snapshot, ctx.snapshot, changed,
                               _importance_floats(ctx.deps["entity_importance"]),
                               _importance_floats(old_imp) if old_imp is not None else None)


def _nerd_dump(view: NerdView, stem: Path) -> None:
    view.dump(stem.with_suffix(".jsonl"))


PROCEDURES: dict[str, Callable] = {
    "entity_features": _features_create,
    "entity_features.update": _features_update,
    "entity_importance": _importance_create,
    "entity_importance.update": _importance_update,
    "ranked_entity_index": _ranked_index_create,
    "ranked_entity_index.update": _ranked_index_update,
    "entity_neighborhood": _neighborhood_create,
    "entity_neighborhood.update": _neighborhood_update,
    "graph_embeddings": _embeddings_create,
    "graph_embeddings.update": _embeddings_update,
    "graph_embeddings.dump": _embeddings_dump,
    "people_embeddings": _people_create,
    "people_embeddings.update": _people_update,
    "nerd_entity_view": _nerd_create,
    "nerd_entity_view.update": _nerd_update,
    "nerd_entity_view.dump": _nerd_dump,
}


def register_procedure(name: str, create: Callable, update: Optional[Callable] = None,
                       dump: Optional[Callable] = None) -> None:
    PROCEDURES[name] = create
    PROCEDURES[f"{name}.update"] = update or (lambda ctx, prev, changed: prev if not changed else create(ctx))
    if dump is not None:
        PROCEDURES[f"{name}.dump"] = dump


def standard_catalog(include_nerd: bool = True) -> ViewCatalog:
    """The feature / index / neighborhood / embedding chain, plus importance and NERD views."""
    views = [
        ViewDefinition("entity_features", (), "analytics"),
        ViewDefinition("entity_importance", (), "analytics"),
        ViewDefinition("ranked_entity_index", ("entity_features", "entity_importance"), "inverted_index"),
        ViewDefinition("entity_neighborhood", ("entity_features",), "analytics"),
        ViewDefinition("graph_embeddings", ("entity_neighborhood",), "vector"),
        ViewDefinition("people_embeddings", ("graph_embeddings", "entity_features"), "vector"),
    ]
    if include_nerd:
        views.append(ViewDefinition("nerd_entity_view", ("entity_importance",), "kv"))
    return ViewCatalog(views)


def artifacts_equal(a, b) -> bool:
    """Structural equality that also compares embedding models and NERD views."""
    if isinstance(a, EmbeddingModel) and isinstance(b, EmbeddingModel):
        return (a.kind == b.kind and a.entities == b.entities and a.predicates == b.predicates
                and np.array_equal(a.entity_vectors, b.entity_vectors)
                and np.array_equal(a.predicate_vectors, b.predicate_vectors))
    return a == b
