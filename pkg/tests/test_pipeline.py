import json
import multiprocessing
import os
import shutil

import pytest

from kgplatform import pipeline
from kgplatform.core import SAME_AS, EntityId, KgSnapshot, same_as_index
from kgplatform.fuse import diff_snapshots
from kgplatform.live import CurationRecord, append_curation, query_server
from kgplatform.oplog import OperationLog, StoreAgent
from kgplatform.pipeline import (
    ConfigError,
    DataDir,
    PipelineConfig,
    StageError,
    UnknownEntity,
    inspect_entity,
    load_snapshot,
    open_server,
    pipeline_lock,
    run_pipeline,
    run_stages,
    save_snapshot,
)
from kgplatform.views import artifacts_equal
from pipelinefixtures import write_json, write_people, write_small_demo

STABLE_VIEWS = ("entity_features", "entity_importance", "entity_neighborhood", "ranked_entity_index")


@pytest.fixture(scope="module")
def built_demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    cfg_path = write_small_demo(root)
    first = run_pipeline(PipelineConfig.load(cfg_path))
    return root, first


@pytest.fixture
def demo(built_demo, tmp_path):
    """A private copy of the already-built small demo."""
    root, first = built_demo
    shutil.copytree(root, tmp_path / "demo")
    return tmp_path / "demo", PipelineConfig.load(tmp_path / "demo" / "pipeline.json"), first


def store_digests(cfg):
    return {sid: StoreAgent(sid, kind, DataDir(cfg.data_dir).stores).store.digest()
            for sid, kind in cfg.stores.items()}


def view_artifacts(cfg):
    state, _ = pipeline._load_view_state(DataDir(cfg.data_dir))
    return state.artifacts


def test_first_run_reports_every_stage(built_demo):
    _, report = built_demo
    assert list(report["stages"]) == ["ingest", "construct", "replay", "views", "embed", "live"]
    assert all("seconds" in rec for rec in report["stages"].values())
    construct = report["stages"]["construct"]
    assert construct["fact_changes"] == construct["facts"] > 0 and construct["lsn"] == 1
    # every shared person was linked across the two sources
    assert construct["entities"] == 60 + 40 + 10 + 40 - 15 + 30
    assert report["stages"]["views"]["executions"]["entity_features"] == 1
    assert {r["replay_lsn"] for r in report["stages"]["replay"].values() if isinstance(r, dict)} == {1}


def test_second_identical_run_is_noop(demo):
    root, cfg, _ = demo
    before = load_snapshot(DataDir(cfg.data_dir).kg)
    digests = store_digests(cfg)
    report = run_pipeline(cfg)
    assert report["fact_changes"] == 0
    assert "lsn" not in report["stages"]["construct"]
    assert report["stages"]["views"].get("skipped") and report["stages"]["embed"].get("skipped")
    after = load_snapshot(DataDir(cfg.data_dir).kg)
    assert after.version == before.version and after.sorted_triples() == before.sorted_triples()
    assert OperationLog(DataDir(cfg.data_dir).log_path).head == 1
    assert store_digests(cfg) == digests
    assert json.loads((DataDir(cfg.data_dir).report).read_text())["fact_changes"] == 0


def test_missing_source_file_fails_before_any_mutation(tmp_path):
    cfg_path = write_small_demo(tmp_path)
    (tmp_path / "raw" / "musicdb" / "catalog.jsonl").unlink()
    cfg = PipelineConfig.load(cfg_path)
    with pytest.raises(ConfigError, match="musicdb"):
        run_pipeline(cfg)
    assert not (tmp_path / "data").exists()


@pytest.mark.parametrize("change, message", [
    ({"thresholds": {"tau_pos": 1.5}}, "tau_pos"),
    ({"thresholds": {"tau_pos": 0.2, "tau_neg": 0.3}}, "tau_neg"),
    ({"sources": ["sources/nope.json"]}, "nope.json"),
    ({"ontology": "missing.json"}, "missing.json"),
])
def test_invalid_configs(tmp_path, change, message):
    cfg_path = write_small_demo(tmp_path)
    data = json.loads(cfg_path.read_text())
    data.update(change)
    write_json(cfg_path, data)
    with pytest.raises(ConfigError, match=message):
        PipelineConfig.load(cfg_path).validate()


def test_volatile_only_change_overwrites_the_partition(demo):
    root, cfg, _ = demo
    path = root / "raw" / "musicdb" / "catalog.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        if "chart_position" in r:
            r["chart_position"] = str(int(r["chart_position"]) + 1)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    before = load_snapshot(DataDir(cfg.data_dir).kg)
    report = run_pipeline(cfg)
    music = report["stages"]["ingest"]["musicdb"]
    assert (music["added"], music["updated"], music["deleted"]) == (0, 0, 0) and music["volatile_rows"] == 30
    assert report["stages"]["ingest"]["moviedb"]["volatile_rows"] == 0
    after = load_snapshot(DataDir(cfg.data_dir).kg)
    added, updated, removed, _ = diff_snapshots(before, after)
    changed = added + updated + removed
    assert len(added) == len(removed) == 30
    assert {k[1] for k in changed} == {"chart_position"}
    assert report["stages"]["construct"]["sources"]["musicdb"]["entities_created"] == 0


def test_source_update_flows_to_views_and_live(demo):
    root, cfg, _ = demo
    path = root / "raw" / "moviedb" / "catalog.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    target = next(r for r in rows if r.get("kind") == "film")
    target["genre"] = "musical"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    report = run_pipeline(cfg)
    assert report["stages"]["construct"]["fact_changes"] == 2
    assert report["stages"]["views"]["changed_entities"] == 1
    assert set(report["stages"]["views"]["mode"].values()) == {"update"}
    snap = load_snapshot(DataDir(cfg.data_dir).kg)
    film = same_as_index(snap)[EntityId("moviedb", target["id"])]
    assert any(t.predicate == "genre" and t.object == "musical" for t in snap.facts_of(film).values())


def test_curation_replay_removes_fact_from_stable_kg(demo):
    root, cfg, _ = demo
    data = DataDir(cfg.data_dir)
    snap = load_snapshot(data.kg)
    victim = next(t for t in snap.sorted_triples() if t.predicate == "genre")
    append_curation(data.curation, CurationRecord("block_fact", fact=victim.key))
    report = run_pipeline(cfg)
    assert report["stages"]["construct"]["fact_changes"] == 1
    after = load_snapshot(data.kg)
    assert after.lookup(victim.key) is None
    # curations are replayed on every run but only change the KG once
    assert run_pipeline(cfg)["fact_changes"] == 0


def _clean_twin(tmp_path, mutate):
    root = tmp_path / "clean"
    cfg_path = write_small_demo(root)
    cfg = PipelineConfig.load(cfg_path)
    run_pipeline(cfg)
    mutate(root)
    run_pipeline(cfg)
    return cfg


def _rename_person(root):
    path = root / "raw" / "moviedb" / "catalog.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    rows[12]["name"] = rows[12]["name"] + " Jr."
    rows[13]["gender"] = "nonbinary"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_crash_after_log_append_recovers(demo, tmp_path, monkeypatch):
    root, cfg, _ = demo
    data = DataDir(cfg.data_dir)
    before = load_snapshot(data.kg)
    _rename_person(root)

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(pipeline, "save_snapshot", boom)
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "construct"
    # the previous snapshot is still the published one; the log moved ahead
    assert load_snapshot(data.kg).sorted_triples() == before.sorted_triples()
    assert OperationLog(data.log_path).head == 2
    monkeypatch.setattr(pipeline, "save_snapshot", save_snapshot)
    run_pipeline(cfg)
    clean = _clean_twin(tmp_path, _rename_person)
    assert load_snapshot(data.kg).sorted_triples() == load_snapshot(DataDir(clean.data_dir).kg).sorted_triples()
    assert store_digests(cfg) == store_digests(clean)


def _killed_run(cfg_path):
    cfg = PipelineConfig.load(cfg_path)
    pipeline.run_views = lambda *a, **k: os._exit(9)
    run_pipeline(cfg)


def test_killed_between_stages_resumes_from_log(demo, tmp_path):
    root, cfg, _ = demo
    _rename_person(root)
    proc = multiprocessing.get_context("fork").Process(target=_killed_run, args=(root / "pipeline.json",))
    proc.start()
    proc.join(60)
    assert proc.exitcode == 9
    data = DataDir(cfg.data_dir)
    meta = json.loads((data.views / "meta.json").read_text())
    assert meta["lsn"] == 1 and OperationLog(data.log_path).head == 2
    report = run_pipeline(cfg)
    assert report["fact_changes"] == 0
    assert report["stages"]["views"]["changed_entities"] == 2
    clean = _clean_twin(tmp_path, _rename_person)
    ours, theirs = view_artifacts(cfg), view_artifacts(clean)
    for name in STABLE_VIEWS:
        assert artifacts_equal(ours[name], theirs[name]), name


def test_since_lsn_widens_view_refresh(demo):
    _, cfg, _ = demo
    report = run_stages(cfg, ["views"], since_lsn=0)
    assert report["stages"]["views"]["changed_entities"] > 0
    assert set(report["stages"]["views"]["mode"].values()) == {"update"}


def test_one_run_per_data_dir(demo):
    _, cfg, _ = demo
    with pipeline_lock(DataDir(cfg.data_dir)):
        with pytest.raises(StageError) as err:
            run_pipeline(cfg)
    assert err.value.stage == "lock"


def test_snapshot_round_trip(tmp_path, smith_kg):
    snap = KgSnapshot._raw(smith_kg._by_subject, 7, {t.key: 0.25 + i / 10 for i, t in enumerate(smith_kg.sorted_triples())})
    save_snapshot(tmp_path, snap)
    back = load_snapshot(tmp_path)
    assert back.version == 7 and back.sorted_triples() == snap.sorted_triples()
    assert dict(back.confidence) == dict(snap.confidence)
    assert load_snapshot(tmp_path / "empty").version == 0


def test_inspect_smith(smith_kg):
    out = inspect_entity(smith_kg, "akg:e1")
    assert len(out["facts"]) == 4 and out["same_as"] == []
    name = next(f for f in out["facts"] if f["predicate"] == "name")
    assert name["sources"] == ["src1", "src2"] and name["trust"] == [0.9, 0.8]
    school = next(f for f in out["facts"] if f["r_predicate"] == "school")
    assert (school["object"], school["r_id"], school["sources"]) == ("UW", "r1", ["src2"])
    with pytest.raises(UnknownEntity):
        inspect_entity(smith_kg, "akg:e404")


def test_inspect_lists_same_as_lineage(built_demo):
    root, _ = built_demo
    snap = load_snapshot(root / "data" / "kg")
    links = same_as_index(snap)
    shared = next(g for g in sorted(set(links.values()), key=str)
                  if len({s.namespace for s, t in links.items() if t == g}) == 2)
    out = inspect_entity(snap, shared)
    assert {rec["source_entity"].split(":")[0] for rec in out["same_as"]} == {"moviedb", "musicdb"}
    assert all(f["confidence"] is not None for f in out["facts"])
    via_source = inspect_entity(snap, out["same_as"][0]["source_entity"])
    assert via_source["entity"] == str(shared) and via_source["linked_from"] == out["same_as"][0]["source_entity"]
    assert not any(f["predicate"] == SAME_AS for f in out["facts"])


def test_serve_answers_and_traces_to_sources(tmp_path):
    cfg = PipelineConfig.load(write_people(tmp_path))
    with pytest.raises(StageError) as err:
        open_server(cfg)
    assert err.value.stage == "serve"
    run_pipeline(cfg)
    server = open_server(cfg, port=0)
    import threading
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        host, port = server.server_address[:2]
        age, spouse = query_server(host, port, [
            {"kind": "intent", "query": {"intent": "AgeOf", "args": ["Joe Biden"]}},
            {"kind": "kgq", "query": 'MATCH (x)-[spouse]->(y) WHERE SEARCH(x, "Beyoncé") RETURN y.name'},
        ])
        assert age["rows"] == [["80"]] and age["answered_by"] == "AgeOf/age"
        assert spouse["rows"] == [["Jay-Z"]]
        assert age["freshness_lsn"] == spouse["freshness_lsn"] == 1
        snap = load_snapshot(DataDir(cfg.data_dir).kg)
        biden = age["args"][0]
        facts = inspect_entity(snap, biden)["facts"]
        assert [f["sources"] for f in facts if f["predicate"] == "age"] == [["wiki"]]
        fact = next(t for t in snap.facts_of(EntityId.parse(biden)).values() if t.predicate == "age")
        _, kgq, intent = query_server(host, port, [
            {"kind": "curate", "record": CurationRecord("block_fact", fact=fact.key).to_record()},
            {"kind": "kgq", "query": f'MATCH (x) WHERE ID(x, "{biden}") RETURN x.age'},
            {"kind": "intent", "query": {"intent": "AgeOf", "args": ["Joe Biden"]}},
        ])
        assert kgq["rows"] == []
        # with the age hidden no AgeOf alternative applies any more
        assert intent["error"] == "NoApplicableAlternative"
    finally:
        server.shutdown()
        server.server_close()
    # the curation logged by the service is replayed into the stable KG on the next run
    assert run_pipeline(cfg)["fact_changes"] == 1
    assert load_snapshot(DataDir(cfg.data_dir).kg).lookup(fact.key) is None
