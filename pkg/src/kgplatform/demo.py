"""Synthetic two-source fixture: a movie catalog and a music catalog.

The movie source owns people, films and cities. The music source owns artists
and albums. A share of the artists are also movie people, listed under the
same or a slightly misspelled name, occasionally with a conflicting birth date,
and with a hometown given as a literal city name that construction resolves to
the movie source's city entity.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Union

FIRST = (
    "Ada Alan Alice Amara Anton Aria Basil Beatrix Bruno Calla Carmen Cedric Clara Dario Delia Dmitri Edith Elias "
    "Elena Emil Farah Felix Freya Gideon Greta Hugo Ida Ines Ivan Jonas Juno Kasimir Katya Leon Lina Livia Magnus "
    "Mara Milo Nadia Nico Nora Oskar Otto Paloma Petra Quentin Rafael Rosa Rufus Sabine Silas Talia Theo Una Vera "
    "Viktor Wanda Yara Zeno"
).split()
LAST = (
    "Abernathy Albescu Barlow Castellano Dalgaard Delacroix Eberhardt Falkner Fontaine Gallagher Haverford Ingram "
    "Jablonski Kavanagh Kowalczyk Lindqvist Marchetti Montague Nakamura Novak Oyelaran Pemberton Quintero Radcliffe "
    "Rasmussen Santangelo Schreiber Takahashi Thorvaldsen Underwood Valentini Vasquez Whitcombe Wojcik Yamamoto "
    "Zielinski Achterberg Brennan Carrington Drummond"
).split()
CITIES = (
    "Aberdeen Antwerp Asuncion Bergen Bilbao Bordeaux Bratislava Cagliari Cork Dresden Dubrovnik Edinburgh Florence "
    "Gdansk Geneva Ghent Granada Graz Hamburg Helsinki Innsbruck Krakow Leipzig Lisbon Ljubljana Lyon Malmo Marseille "
    "Montreal Naples Oporto Oslo Palermo Quebec Riga Rotterdam Salzburg Seville Tallinn Trieste Turin Utrecht Valencia "
    "Vilnius Zagreb Zurich"
).split()
ADJ = (
    "Silent Crimson Hollow Distant Broken Golden Quiet Restless Hidden Burning Frozen Endless Wandering Fading "
    "Electric Velvet Bitter Northern Paper Midnight"
).split()
NOUN = (
    "River Harbor Garden Empire Mirror Season Signal Horizon Lantern Orchard Station Kingdom Compass Meadow Tide "
    "Avenue Citadel Orbit Canyon Archive Voyage Ember Parade Forest"
).split()
FILM_GENRES = ("drama", "comedy", "thriller", "documentary", "science fiction", "romance")
MUSIC_GENRES = ("pop", "jazz", "folk", "electronic", "rock", "classical")


@dataclass
class DemoConfig:
    n_people: int = 650
    n_films: int = 520
    n_cities: int = 40
    n_artists: int = 450
    n_shared: int = 150
    n_albums: int = 400
    typo_rate: float = 0.3
    conflict_rate: float = 0.1
    embed_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_shared > min(self.n_people, self.n_artists):
            raise ValueError("n_shared exceeds the people or artist count")
        if self.n_cities > len(CITIES):
            raise ValueError(f"at most {len(CITIES)} cities")


def _unique(rng: random.Random, n: int, make) -> list[str]:
    seen: dict[str, None] = {}
    while len(seen) < n:
        seen.setdefault(make(rng), None)
    return list(seen)


def _typo(rng: random.Random, name: str) -> str:
    first, last = name.split(" ", 1)
    i = rng.randrange(1, len(last) - 2)
    return f"{first} {last[:i]}{last[i + 1]}{last[i]}{last[i + 2:]}"


def _date(rng: random.Random) -> str:
    return f"{rng.randint(1930, 1999)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"


def _other_date(rng: random.Random, date: str) -> str:
    while True:
        other = _date(rng)
        if other != date:
            return other


def demo_rows(cfg: DemoConfig) -> tuple[list[dict], list[dict]]:
    """(movie rows, music rows) as JSON-ready dicts."""
    rng = random.Random(cfg.seed)
    names = _unique(rng, cfg.n_people + cfg.n_artists - cfg.n_shared,
                    lambda r: f"{r.choice(FIRST)} {r.choice(LAST)}")
    cities = CITIES[: cfg.n_cities]
    movie: list[dict] = [{"id": f"c{i}", "kind": "city", "name": c} for i, c in enumerate(cities)]
    people = []
    for i in range(cfg.n_people):
        p = {"id": f"p{i}", "kind": "person", "name": names[i], "birth_date": _date(rng),
             "gender": rng.choice(("female", "male")), "born_in": f"c{rng.randrange(cfg.n_cities)}"}
        people.append(p)
    movie += people
    titles = _unique(rng, cfg.n_films, lambda r: f"The {r.choice(ADJ)} {r.choice(NOUN)}"
                     if r.random() < 0.5 else f"{r.choice(ADJ)} {r.choice(NOUN)} {r.randint(2, 9)}")
    for i, title in enumerate(titles):
        cast = rng.sample(range(cfg.n_people), rng.randint(2, 5))
        movie.append({"id": f"f{i}", "kind": "film", "title": title, "release_year": str(rng.randint(1960, 2023)),
                      "genre": rng.choice(FILM_GENRES), "director": [f"p{rng.randrange(cfg.n_people)}"],
                      "cast": [f"p{j}" for j in cast]})

    music: list[dict] = []
    shared = rng.sample(range(cfg.n_people), cfg.n_shared)
    for k in range(cfg.n_artists):
        if k < cfg.n_shared:
            src = people[shared[k]]
            name = _typo(rng, src["name"]) if rng.random() < cfg.typo_rate else src["name"]
            date = src["birth_date"]
            if name == src["name"] and rng.random() < cfg.conflict_rate:
                date = _other_date(rng, date)
            city = cities[int(src["born_in"][1:])]
            gender = src["gender"]
        else:
            name = names[cfg.n_people + k - cfg.n_shared]
            date, city, gender = _date(rng), rng.choice(cities), rng.choice(("female", "male"))
        music.append({"id": f"a{k}", "kind": "person", "name": name, "birth_date": date,
                      "gender": gender, "hometown": city})
    albums = _unique(rng, cfg.n_albums, lambda r: f"{r.choice(NOUN)} of {r.choice(ADJ)} {r.choice(NOUN)}s")
    for i, title in enumerate(albums):
        music.append({"id": f"al{i}", "kind": "album", "title": title, "year": str(rng.randint(1965, 2023)),
                      "genre": rng.choice(MUSIC_GENRES), "by": [f"a{rng.randrange(cfg.n_artists)}"],
                      "chart_position": str(rng.randint(1, 200))})
    return movie, music


PERSON_MODEL = {
    "kind": "logistic", "bias": -10.0,
    "features": [{"predicate": "name", "comparator": "qgram_jaccard", "weight": 14.0},
                 {"predicate": "birth_date", "comparator": "exact", "weight": 6.0}],
}
TITLE_MODEL = {"kind": "logistic", "bias": -14.0,
               "features": [{"predicate": "name", "comparator": "qgram_jaccard", "weight": 20.0}]}


def _linking() -> dict:
    return {"model": TITLE_MODEL, "types": {"person": {"model": PERSON_MODEL}}}


def _rename(target: str, source: str, **extra) -> dict:
    return {"kind": "rename", "target_predicate": target, "source_predicates": [source], **extra}


def ontology_dict() -> dict:
    return {
        "types": ["person", "film", "album", "city"],
        "predicates": {
            "name": {}, "genre": {},
            "birth_date": {"functional": True},
            "sex_or_gender": {"functional": True},
            "born_in": {"functional": True, "range": "city"},
            "release_year": {"functional": True},
            "director": {"range": "person"},
            "cast": {"range": "person"},
            "performer": {"range": "person"},
            "chart_position": {"functional": True, "volatile": True},
        },
    }


def source_dicts() -> tuple[dict, dict]:
    movies = {
        "source_id": "moviedb", "artifacts": ["../raw/moviedb/catalog.jsonl"], "id_column": "id",
        "default_trust": 0.9,
        "pgf_rules": [
            _rename("type", "kind", required=True), _rename("name", "name"), _rename("name", "title"),
            _rename("birth_date", "birth_date"), _rename("sex_or_gender", "gender"),
            _rename("born_in", "born_in", ref=True), _rename("release_year", "release_year"),
            _rename("genre", "genre"), _rename("director", "director", ref=True), _rename("cast", "cast", ref=True),
        ],
        "linking": _linking(),
    }
    music = {
        "source_id": "musicdb", "artifacts": ["../raw/musicdb/catalog.jsonl"], "id_column": "id",
        "default_trust": 0.8,
        "volatile_predicates": ["chart_position"],
        "pgf_rules": [
            _rename("type", "kind", required=True), _rename("name", "name"), _rename("name", "title"),
            _rename("birth_date", "birth_date"), _rename("sex_or_gender", "gender"),
            _rename("born_in", "hometown", object_type="city"), _rename("release_year", "year"),
            _rename("genre", "genre"), _rename("performer", "by", ref=True),
            _rename("chart_position", "chart_position"),
        ],
        "linking": _linking(),
    }
    return movies, music


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_demo(root: Union[str, Path], cfg: DemoConfig = DemoConfig()) -> Path:
    """Write raw data, source configs, ontology and a pipeline config; return the pipeline config path."""
    root = Path(root)
    movie, music = demo_rows(cfg)
    _write_jsonl(root / "raw" / "moviedb" / "catalog.jsonl", movie)
    _write_jsonl(root / "raw" / "musicdb" / "catalog.jsonl", music)
    movies_src, music_src = source_dicts()
    _write_json(root / "sources" / "moviedb.json", movies_src)
    _write_json(root / "sources" / "musicdb.json", music_src)
    _write_json(root / "ontology.json", ontology_dict())
    _write_jsonl(root / "streams" / "scores.jsonl", [])
    pipeline = {
        "data_dir": "data",
        "sources": ["sources/moviedb.json", "sources/musicdb.json"],
        "ontology": "ontology.json",
        "thresholds": {"tau_pos": 0.9, "tau_neg": 0.1, "theta_rel": 0.5, "theta_reject": 0.9},
        "views": {"config": {"embed": {"dim": 16, "epochs": cfg.embed_epochs, "seed": cfg.seed}}},
        "embeddings": [{"kind": "transe", "dim": 32, "epochs": cfg.embed_epochs, "seed": cfg.seed}],
        "live": {"host": "127.0.0.1", "port": 7687, "streams": ["streams/scores.jsonl"]},
        "seed": cfg.seed,
    }
    path = root / "pipeline.json"
    _write_json(path, pipeline)
    return path
