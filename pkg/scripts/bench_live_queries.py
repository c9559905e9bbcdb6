"""Latency of live KGQ and intent requests over a built data directory.

    python scripts/run_demo.py --root demo-run
    python scripts/bench_live_queries.py --config demo-run/pipeline.json -n 2000
"""
import argparse
import pickle
import random
import sys
import time

import numpy as np

from kgplatform.pipeline import DataDir, PipelineConfig, load_intents
from kgplatform.live import LiveService, default_virtual_ops

TEMPLATES = (
    'MATCH (f:film)-[director]->(p) WHERE ID(f, "{film}") RETURN p.name',
    'MATCH (f:film)-[cast]->(p:person) WHERE ID(f, "{film}") RETURN p.name',
    'MATCH (p)<-[cast]-(f:film) WHERE ID(p, "{person}") RETURN f.name',
    'MATCH (p:person)-[born_in]->(c:city) WHERE ID(p, "{person}") RETURN c.name',
    'MATCH (p:person) WHERE SEARCH(p, "{name}") RETURN p',
    'MATCH (a:album)-[performer]->(p)-[born_in]->(c) WHERE ID(a, "{album}") RETURN c.name',
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="demo-run/pipeline.json")
    ap.add_argument("-n", type=int, default=1000, help="number of requests")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = PipelineConfig.load(args.config)
    with open(DataDir(cfg.data_dir).live, "rb") as fh:
        built = pickle.load(fh)
    g = built["indexes"]
    svc = LiveService(g, load_intents(cfg.live.intents), default_virtual_ops(), built["nerd_view"])
    by_type: dict[str, list[str]] = {}
    for e in g.entities():
        for t in g.types(e):
            by_type.setdefault(t, []).append(e)
    rng = random.Random(args.seed)
    requests = []
    for _ in range(args.n):
        if rng.random() < 0.2 and by_type.get("person"):
            requests.append({"kind": "intent", "query": {"intent": "FilmsBy", "args": [rng.choice(by_type["person"])]}})
            continue
        person = rng.choice(by_type["person"])
        q = rng.choice(TEMPLATES).format(film=rng.choice(by_type.get("film", [""])), person=person,
                                         album=rng.choice(by_type.get("album", [""])), name=g.name_of(person))
        requests.append({"kind": "kgq", "query": q})

    latencies, errors = [], 0
    for req in requests:
        t0 = time.perf_counter()
        out = svc.handle(req)
        latencies.append((time.perf_counter() - t0) * 1000.0)
        errors += "error" in out
    lat = np.array(latencies)
    p50, p95, p99 = np.percentile(lat, [50, 95, 99])
    print(f"{len(lat)} requests over {len(g.kv)} entities: p50 {p50:.2f} ms  p95 {p95:.2f} ms  "
          f"p99 {p99:.2f} ms  max {lat.max():.2f} ms  errors {errors}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
