"""Pipeline driver over one data directory.

Stages run in order: ingest, construct (fusion, curation replay, log append,
store replay), views, embed, live. Each stage reads what the previous one
published, so any stage can be rerun on its own and a crashed run resumes from
the operation log.

Data directory layout::

    .lock                         one pipeline run at a time
    sources/<id>/consumed.jsonl   aligned entities the stable KG reflects
    sources/<id>/candidate.jsonl  aligned entities of the pending delta
    pending/<id>/pending/         delta partitions awaiting construction
    kg/CURRENT, kg/v<N>/          published snapshots
    log/ops.jsonl, log/staged/    operation log and payloads
    stores/                       agent-maintained stores and progress
    views/                        view artifacts, state and LSN
    embeddings/                   trained models and audit list
    live/indexes.pkl              serving indexes
    curation.jsonl                curation stream
"""
from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import pickle
import shutil
import time
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

from kgplatform.core import SAME_AS, EntityId, KgError, KgSnapshot, key_to_record, read_jsonl, record_to_key, \
    same_as_index, write_jsonl
from kgplatform.embed import EmptyTrainingSet, TrainConfig, build_training_view, train, verify_facts
from kgplatform.fuse import confidence_map, diff_snapshots, process_source_payloads, update_source_trust
from kgplatform.ingest import SourceConfig, read_delta, read_entities, run_source_pipeline, write_delta, \
    write_entities
from kgplatform.kgq import MAX_DEPTH
from kgplatform.live import IntentDef, LiveServer, LiveService, apply_curations, build_live_indexes, \
    default_intents, default_virtual_ops, read_curations, read_stream_file
from kgplatform.nerd import build_entity_view
from kgplatform.ontology import Ontology
from kgplatform.oplog import OperationLog, StoreAgent, stage_snapshot_changes
from kgplatform.simstrings import StringEncoder
from kgplatform.views import ViewCatalog, ViewsConfig, ViewState, plan_refresh, refresh_views, standard_catalog

log = logging.getLogger(__name__)

PENDING = "pending"
DEFAULT_STORES = {"analytics": "analytics", "kv": "kv", "inverted_index": "inverted_index", "vector": "vector"}
CONFIDENCE_TOLERANCE = 1e-12


class PipelineError(KgError):
    pass


class ConfigError(PipelineError):
    pass


class StageError(PipelineError):
    def __init__(self, stage: str, reason: str):
        super().__init__(f"stage {stage}: {reason}")
        self.stage = stage
        self.reason = reason


class UnknownEntity(PipelineError, KeyError):
    def __str__(self):
        return f"unknown entity {self.args[0]!r}"


# -- configuration ---------------------------------------------------------------------

@dataclass
class Thresholds:
    tau_pos: float = 0.9
    tau_neg: float = 0.1
    theta_rel: float = 0.5
    theta_reject: float = 0.9

    def validate(self) -> "Thresholds":
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"threshold {name}={value} outside [0, 1]")
        if self.tau_neg >= self.tau_pos:
            raise ConfigError(f"tau_neg {self.tau_neg} must be below tau_pos {self.tau_pos}")
        return self


@dataclass
class LiveSettings:
    host: str = "127.0.0.1"
    port: int = 7687
    max_depth: int = MAX_DEPTH
    context_capacity: int = 8
    streams: list[Path] = field(default_factory=list)
    intents: Optional[Path] = None


@dataclass
class PipelineConfig:
    data_dir: Path
    sources: list[Path]
    ontology: Optional[Path] = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    catalog: Optional[Path] = None
    views: ViewsConfig = field(default_factory=ViewsConfig)
    embeddings: list[TrainConfig] = field(default_factory=list)
    verify_percentile: float = 1.0
    encoders: dict[str, Path] = field(default_factory=dict)
    live: LiveSettings = field(default_factory=LiveSettings)
    stores: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_STORES))
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Union[str, Path] = ".") -> "PipelineConfig":
        base = Path(base_dir)

        def path(p):
            return None if p is None else base / p

        try:
            views = dict(d.get("views", {}))
            live = dict(d.get("live", {}))
            cfg = cls(
                data_dir=base / d.get("data_dir", "data"),
                sources=[base / s for s in d["sources"]],
                ontology=path(d.get("ontology")),
                thresholds=Thresholds(**d.get("thresholds", {})),
                catalog=path(views.get("catalog")),
                views=ViewsConfig.from_dict(views.get("config", {})),
                embeddings=[TrainConfig(**e) for e in d.get("embeddings", [])],
                verify_percentile=float(d.get("verify_percentile", 1.0)),
                encoders={k: base / v for k, v in d.get("encoders", {}).items()},
                live=LiveSettings(
                    host=live.get("host", "127.0.0.1"), port=int(live.get("port", 7687)),
                    max_depth=int(live.get("max_depth", MAX_DEPTH)),
                    context_capacity=int(live.get("context_capacity", 8)),
                    streams=[base / s for s in live.get("streams", [])], intents=path(live.get("intents")),
                ),
                stores=dict(d.get("stores", DEFAULT_STORES)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError, KgError) as exc:
            raise ConfigError(f"{type(exc).__name__}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, path.parent)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, views=replace(self.views, embed=replace(self.views.embed, seed=seed)),
                       embeddings=[replace(e, seed=seed) for e in self.embeddings])

    def source_configs(self) -> list[SourceConfig]:
        out = []
        for p in self.sources:
            try:
                sc = SourceConfig.load(p)
            except (KeyError, ValueError, KgError) as exc:
                raise ConfigError(f"{p}: {type(exc).__name__}: {exc}") from exc
            # pipeline-wide linking thresholds and seed apply to every source and entity type
            sc.linking = {**sc.linking, "tau_pos": self.thresholds.tau_pos, "tau_neg": self.thresholds.tau_neg,
                          "seed": self.seed}
            out.append(sc)
        return out

    def validate(self) -> "PipelineConfig":
        """Check every referenced file and range; runs before anything is written."""
        self.thresholds.validate()
        if not 0.0 <= self.verify_percentile <= 100.0:
            raise ConfigError(f"verify_percentile {self.verify_percentile} outside [0, 100]")
        if not self.sources:
            raise ConfigError("no sources configured")
        missing = [p for p in self.sources if not p.is_file()]
        for opt in (self.ontology, self.catalog, self.live.intents):
            if opt is not None and not opt.is_file():
                missing.append(opt)
        missing += [p for p in list(self.encoders.values()) + self.live.streams if not p.is_file()]
        if missing:
            raise ConfigError(f"missing files: {', '.join(map(str, missing))}")
        ids = set()
        for sc in self.source_configs():
            if sc.source_id in ids:
                raise ConfigError(f"duplicate source id {sc.source_id!r}")
            ids.add(sc.source_id)
            absent = [a for a in sc.artifacts if not Path(a).is_file()]
            if absent:
                raise ConfigError(f"source {sc.source_id}: missing artifacts {', '.join(map(str, absent))}")
        if set(self.stores.values()) - set(DEFAULT_STORES.values()):
            raise ConfigError(f"unknown store kinds in {self.stores}")
        return self


# -- data directory --------------------------------------------------------------------

class DataDir:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def consumed(self, source_id: str) -> Path:
        return self.root / "sources" / source_id / "consumed.jsonl"

    def candidate(self, source_id: str) -> Path:
        return self.root / "sources" / source_id / "candidate.jsonl"

    @property
    def pending_root(self) -> Path:
        return self.root / "pending"

    def pending(self, source_id: str) -> Path:
        return self.pending_root / source_id / PENDING

    kg = property(lambda self: self.root / "kg")
    log_path = property(lambda self: self.root / "log" / "ops.jsonl")
    stores = property(lambda self: self.root / "stores")
    views = property(lambda self: self.root / "views")
    embeddings = property(lambda self: self.root / "embeddings")
    live = property(lambda self: self.root / "live" / "indexes.pkl")
    curation = property(lambda self: self.root / "curation.jsonl")
    report = property(lambda self: self.root / "run-report.json")
    lock = property(lambda self: self.root / ".lock")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8"))


def _read_json(path: Path, default=None):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else default


@contextlib.contextmanager
def pipeline_lock(data: DataDir):
    data.root.mkdir(parents=True, exist_ok=True)
    with open(data.lock, "a+") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise StageError("lock", f"another pipeline run holds {data.lock}") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# -- snapshot persistence ------------------------------------------------------------------

def save_snapshot(kg_dir: Union[str, Path], snapshot: KgSnapshot) -> Path:
    """Write ``v<version>/`` and then repoint ``CURRENT``; readers never see a partial snapshot."""
    kg_dir = Path(kg_dir)
    out = kg_dir / f"v{snapshot.version}"
    write_jsonl(out / "triples.jsonl", snapshot.sorted_triples())
    conf = [[key_to_record(k), p] for k, p in sorted(snapshot.confidence.items())]
    _write_json(out / "confidence.json", conf)
    _write_json(kg_dir / "CURRENT", {"version": snapshot.version})
    return out


def load_snapshot(kg_dir: Union[str, Path], version: Optional[int] = None) -> KgSnapshot:
    kg_dir = Path(kg_dir)
    if version is None:
        current = _read_json(kg_dir / "CURRENT")
        if current is None:
            return KgSnapshot()
        version = current["version"]
    d = kg_dir / f"v{version}"
    if not d.is_dir():
        raise PipelineError(f"snapshot version {version} not found under {kg_dir}")
    snap = KgSnapshot.from_triples(read_jsonl(d / "triples.jsonl"), version)
    conf = {record_to_key(k): float(p) for k, p in _read_json(d / "confidence.json", [])}
    return KgSnapshot._raw(snap._by_subject, version, conf)


def prune_snapshots(kg_dir: Path, keep: Iterable[int]) -> None:
    keep = {f"v{v}" for v in keep}
    for d in kg_dir.glob("v*"):
        if d.is_dir() and d.name not in keep:
            shutil.rmtree(d)


def _importance(data: DataDir) -> dict[EntityId, float]:
    return {EntityId.parse(k): v for k, v in _read_json(data.views / "importance.json", {}).items()}


# -- stages ------------------------------------------------------------------------------

@dataclass
class RunReport:
    stages: dict[str, dict] = field(default_factory=dict)

    @contextlib.contextmanager
    def stage(self, name: str):
        rec = self.stages.setdefault(name, {})
        t0 = time.perf_counter()
        try:
            yield rec
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            log.exception("stage %s failed", name)
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            rec["seconds"] = round(time.perf_counter() - t0, 4)

    def to_record(self) -> dict:
        construct = self.stages.get("construct", {})
        return {"stages": self.stages, "fact_changes": construct.get("fact_changes", 0),
                "total_seconds": round(sum(s.get("seconds", 0.0) for s in self.stages.values()), 4)}


def run_ingest(cfg: PipelineConfig, data: DataDir, report: RunReport) -> None:
    with report.stage("ingest") as rec:
        ontology = Ontology.load(cfg.ontology) if cfg.ontology else None
        for sc in cfg.source_configs():
            previous = read_entities(data.consumed(sc.source_id))
            aligned, delta = run_source_pipeline(sc, previous, ontology=ontology, tn=PENDING)
            pending = data.pending(sc.source_id)
            if pending.exists():
                shutil.rmtree(pending)
            write_delta(delta, data.pending_root, default_trust=sc.default_trust, locale=sc.locale,
                        ref_predicates=sc.pgf.ref_predicates)
            write_entities(data.candidate(sc.source_id), aligned)
            rec[sc.source_id] = {"entities": len(aligned), "added": len(delta.added), "updated": len(delta.updated),
                                 "deleted": len(delta.deleted), "volatile_rows": len(delta.volatile_dump)}


def _confidence_close(a: Mapping, b: Mapping) -> bool:
    return a.keys() == b.keys() and all(abs(a[k] - b[k]) <= CONFIDENCE_TOLERANCE for k in a)


def run_construct(cfg: PipelineConfig, data: DataDir, report: RunReport) -> None:
    """Fuse pending deltas in source order, replay curations, then log, publish and replay stores.

    Ordering makes every crash point recoverable: the payload is logged before
    the snapshot is published, and consumed entities are promoted last, so a
    rerun recomputes the same delta and replace-by-entity payloads stay idempotent.
    """
    with report.stage("construct") as rec:
        ontology = Ontology.load(cfg.ontology) if cfg.ontology else None
        encoders = {k: StringEncoder.load(p) for k, p in cfg.encoders.items()}
        importance = _importance(data) or None
        start = load_snapshot(data.kg)
        snap = start
        processed = []
        rec["sources"] = {}
        trust = None
        for sc in cfg.source_configs():
            pending = data.pending(sc.source_id)
            if not pending.is_dir():
                continue
            delta = read_delta(pending, sc.source_id)
            snap, frep = process_source_payloads(
                snap, delta, sc, ontology=ontology, encoders=encoders, importance=importance,
                theta_rel=cfg.thresholds.theta_rel, theta_resolve=cfg.thresholds.theta_reject)
            processed.append(sc.source_id)
            trust = frep.trust
            frec = frep.to_record()
            frec.pop("changed_entities")
            frec["changed_entity_count"] = len(frep.changed_entities)
            rec["sources"][sc.source_id] = frec

        curations = read_curations(data.curation)
        curated = apply_curations(snap, curations)
        rec["curations"] = len(curations)
        if curated is not snap:
            functional = ontology.functional_predicates if ontology is not None else frozenset()
            trust = update_source_trust(curated, functional_predicates=functional).trust
            snap = KgSnapshot._raw(curated._by_subject, curated.version, confidence_map(curated, trust))
        if trust is not None:
            rec["trust"] = trust

        added, updated, removed, touched = diff_snapshots(start, snap)
        rec["fact_changes"] = len(added) + len(updated) + len(removed)
        rec["facts_added"], rec["facts_updated"], rec["facts_removed"] = len(added), len(updated), len(removed)
        oplog = OperationLog(data.log_path)
        if rec["fact_changes"] or not _confidence_close(start.confidence, snap.confidence):
            snap = KgSnapshot._raw(snap._by_subject, start.version + 1, snap.confidence)
            ref = f"staged/lsn{oplog.head + 1:08d}.jsonl"
            stage_snapshot_changes(data.log_path.parent / ref, snap, touched)
            lsn = oplog.append(ref, touched)
            save_snapshot(data.kg, snap)
            rec["lsn"] = lsn
            log.info("published snapshot v%d at lsn %d (%d facts changed)", snap.version, lsn, rec["fact_changes"])
        else:
            snap = start
        for src in processed:
            if data.candidate(src).exists():
                data.candidate(src).replace(data.consumed(src))
            shutil.rmtree(data.pending(src), ignore_errors=True)
        rec["kg_version"] = snap.version
        rec["facts"] = len(snap)
        rec["entities"] = sum(1 for e in snap.subject_index if e.is_graph)
        rec["log_head"] = oplog.head

    with report.stage("replay") as rec:
        oplog = OperationLog(data.log_path)
        for store_id, kind in sorted(cfg.stores.items()):
            agent = StoreAgent(store_id, kind, data.stores, checkpoint_every=16).replay(oplog)
            rec[store_id] = {"replay_lsn": agent.replay_lsn, "digest": agent.store.digest()}


def _catalog(cfg: PipelineConfig) -> ViewCatalog:
    return ViewCatalog.load(cfg.catalog) if cfg.catalog else standard_catalog()


def _load_view_state(data: DataDir) -> tuple[Optional[ViewState], dict]:
    meta = _read_json(data.views / "meta.json", {})
    path = data.views / "state.pkl"
    if not meta or not path.exists():
        return None, {}
    with open(path, "rb") as fh:
        artifacts = pickle.load(fh)
    state = ViewState(artifacts=artifacts, snapshot=load_snapshot(data.kg, meta["snapshot_version"]),
                      lsn=dict(meta.get("view_lsn", {})))
    return state, meta


def run_views(cfg: PipelineConfig, data: DataDir, report: RunReport, since_lsn: Optional[int] = None) -> None:
    with report.stage("views") as rec:
        snap = load_snapshot(data.kg)
        oplog = OperationLog(data.log_path)
        catalog = _catalog(cfg)
        plan = plan_refresh(catalog, [v for v in catalog.views])
        state, meta = _load_view_state(data)
        if state is None:
            changed = None
        else:
            lower = meta.get("lsn", 0) if since_lsn is None else since_lsn
            changed = sorted({e for entry in oplog.entries(lower) for e in entry.changed_entities})
            if not changed and all(v in state.artifacts for v in plan) and state.snapshot.version == snap.version:
                rec.update(skipped=True, lsn=meta.get("lsn", 0))
                return
        state, rrep = refresh_views(catalog, plan, snap, state, changed, cfg.views, lsn=oplog.head)
        rec.update(rrep.to_record())
        rec["changed_entities"] = None if changed is None else len(changed)
        _atomic_write(data.views / "state.pkl", pickle.dumps(state.artifacts, protocol=pickle.HIGHEST_PROTOCOL))
        state.save(data.views / "artifacts", catalog)
        if "entity_importance" in state.artifacts:
            _write_json(data.views / "importance.json",
                        {e: r["aggregate"] for e, r in state.artifacts["entity_importance"].items()})
        _write_json(data.views / "meta.json", {"lsn": oplog.head, "snapshot_version": snap.version,
                                               "view_lsn": state.lsn})
        prune_snapshots(data.kg, {snap.version})
        rec["lsn"] = oplog.head


def run_embed(cfg: PipelineConfig, data: DataDir, report: RunReport) -> None:
    with report.stage("embed") as rec:
        snap = load_snapshot(data.kg)
        configs = [asdict(c) for c in cfg.embeddings]
        meta = _read_json(data.embeddings / "meta.json", {})
        if not configs or (meta.get("snapshot_version") == snap.version and meta.get("configs") == configs):
            rec["skipped"] = True
            return
        try:
            view = build_training_view(snap)
        except EmptyTrainingSet:
            rec["skipped"] = True
            return
        facts = [(view.entities[s], view.predicates[p], view.entities[o]) for s, p, o in view.triples]
        rec["training_facts"] = len(view)
        models = []
        for i, tc in enumerate(cfg.embeddings):
            model = train(view, tc)
            path = data.embeddings / f"{i}-{tc.kind}.kge"
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(path)
            flagged = verify_facts(model, facts, cfg.verify_percentile)
            _write_json(data.embeddings / f"{i}-{tc.kind}.audit.json",
                        [[str(s), p, str(o)] for s, p, o in flagged])
            models.append({"kind": tc.kind, "path": path.name, "flagged": len(flagged)})
        rec["models"] = models
        _write_json(data.embeddings / "meta.json", {"snapshot_version": snap.version, "configs": configs})


def run_live_build(cfg: PipelineConfig, data: DataDir, report: RunReport) -> None:
    with report.stage("live") as rec:
        snap = load_snapshot(data.kg)
        importance = _importance(data)
        state, _ = _load_view_state(data)
        nerd_view = None
        if state is not None and state.snapshot.version == snap.version:
            nerd_view = state.artifacts.get("nerd_entity_view")
        if nerd_view is None:
            nerd_view = build_entity_view(snap, importance)
        streams = [r for p in cfg.live.streams for r in read_stream_file(p)]
        curations = read_curations(data.curation)
        lsn = OperationLog(data.log_path).head
        indexes = build_live_indexes(snap, streams, nerd_view, importance, lsn, curations)
        _atomic_write(data.live, pickle.dumps({"indexes": indexes, "nerd_view": nerd_view, "kg_version": snap.version},
                                              protocol=pickle.HIGHEST_PROTOCOL))
        rec.update(entities=len(indexes.kv), stream_records=len(streams), curations=len(curations),
                   pending_references=len(indexes.pending), freshness_lsn=lsn)


STAGE_FUNCS = {"ingest": run_ingest, "construct": run_construct, "views": run_views,
               "embed": run_embed, "live-build": run_live_build}


def run_stages(cfg: PipelineConfig, stages: Iterable[str], since_lsn: Optional[int] = None,
               report_path: Union[str, Path, None] = None) -> dict:
    """Run the named stages under the data-directory lock and write the run report."""
    cfg.validate()
    data = DataDir(cfg.data_dir)
    report = RunReport()
    with pipeline_lock(data):
        for name in stages:
            if name == "views":
                run_views(cfg, data, report, since_lsn)
            else:
                STAGE_FUNCS[name](cfg, data, report)
    out = report.to_record()
    _write_json(Path(report_path) if report_path else data.report, out)
    return out


def run_pipeline(cfg: PipelineConfig, since_lsn: Optional[int] = None,
                 report_path: Union[str, Path, None] = None) -> dict:
    return run_stages(cfg, ("ingest", "construct", "views", "embed", "live-build"), since_lsn, report_path)


# -- serving and inspection ---------------------------------------------------------------

def load_intents(path: Optional[Path]) -> dict[str, IntentDef]:
    intents = default_intents()
    if path is not None:
        for d in json.loads(Path(path).read_text(encoding="utf-8")):
            intents[d["name"]] = IntentDef.from_dict(d)
    return intents


def open_server(cfg: PipelineConfig, port: Optional[int] = None) -> LiveServer:
    """Bind the live endpoint over the last built indexes (port 0 picks a free one)."""
    data = DataDir(cfg.data_dir)
    if not data.live.exists():
        raise StageError("serve", f"live indexes not built ({data.live} missing); run live-build first")
    try:
        with open(data.live, "rb") as fh:
            built = pickle.load(fh)
        service = LiveService(built["indexes"], load_intents(cfg.live.intents), default_virtual_ops(),
                              built["nerd_view"], curation_path=data.curation,
                              context_capacity=cfg.live.context_capacity, max_depth=cfg.live.max_depth)
        return LiveServer(service, cfg.live.host, cfg.live.port if port is None else port)
    except (OSError, pickle.UnpicklingError, KeyError, KgError) as exc:
        raise StageError("serve", f"{type(exc).__name__}: {exc}") from exc


def inspect_entity(snapshot: KgSnapshot, entity_id: Union[str, EntityId]) -> dict:
    """Every fact of an entity with sources, trust and confidence, plus its same_as lineage.

    A source-namespace id is followed to the graph entity it was linked into.
    """
    try:
        eid = EntityId.parse(entity_id)
    except (KgError, ValueError) as exc:
        raise UnknownEntity(str(entity_id)) from exc
    linked_from = None
    if not snapshot.facts_of(eid):
        target = same_as_index(snapshot).get(eid)
        if target is None:
            raise UnknownEntity(str(entity_id))
        linked_from, eid = str(entity_id), target
    facts, lineage = [], []
    for t in sorted(snapshot.facts_of(eid).values(), key=lambda t: t.key):
        if t.predicate == SAME_AS:
            lineage.append({"source_entity": str(t.object), "sources": list(t.sources), "trust": list(t.trust)})
            continue
        facts.append({
            "predicate": t.predicate, "object": str(t.object), "object_kind": t.object_kind.value,
            "r_id": t.r_id, "r_predicate": t.r_predicate, "locale": t.locale,
            "sources": list(t.sources), "trust": list(t.trust),
            "confidence": snapshot.confidence.get(t.key),
        })
    out = {"entity": str(eid), "facts": facts, "same_as": lineage}
    if linked_from is not None:
        out["linked_from"] = linked_from
    return out
