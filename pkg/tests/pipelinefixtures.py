"""On-disk pipeline fixtures: a scaled-down demo and a tiny people source for serving checks."""
import json
from pathlib import Path

from kgplatform.demo import DemoConfig, write_demo

SMALL_DEMO = DemoConfig(n_people=60, n_films=40, n_cities=10, n_artists=40, n_shared=15, n_albums=30,
                        embed_epochs=2)

PEOPLE = [
    {"id": "beyonce", "kind": "person", "name": "Beyoncé", "gender": "female", "spouse": ["jay_z"],
     "born_in": ["houston"]},
    {"id": "jay_z", "kind": "person", "name": "Jay-Z", "gender": "male", "spouse": ["beyonce"]},
    {"id": "biden", "kind": "person", "name": "Joe Biden", "gender": "male", "age": "80"},
    {"id": "houston", "kind": "city", "name": "Houston"},
]


def _rename(target, source, **extra):
    return {"kind": "rename", "target_predicate": target, "source_predicates": [source], **extra}


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1), encoding="utf-8")
    return path


def write_people(root: Path) -> Path:
    root = Path(root)
    raw = root / "raw" / "people.jsonl"
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in PEOPLE), encoding="utf-8")
    write_json(root / "sources" / "people.json", {
        "source_id": "wiki", "artifacts": ["../raw/people.jsonl"], "default_trust": 0.9,
        "pgf_rules": [_rename("type", "kind", required=True), _rename("name", "name"),
                      _rename("sex_or_gender", "gender"), _rename("spouse", "spouse", ref=True),
                      _rename("born_in", "born_in", ref=True), _rename("age", "age")],
    })
    return write_json(root / "pipeline.json", {
        "data_dir": "data", "sources": ["sources/people.json"],
        "views": {"config": {"embed": {"dim": 4, "epochs": 2}}},
        "live": {"host": "127.0.0.1", "port": 0},
    })


def write_small_demo(root: Path) -> Path:
    return write_demo(root, SMALL_DEMO)
