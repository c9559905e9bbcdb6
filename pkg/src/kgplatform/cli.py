"""``kgp``: run pipeline stages, serve the live endpoint, inspect entity provenance.

Exit codes: 0 success, 2 configuration error, 3 stage failure (stage named on stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from kgplatform.pipeline import (
    ConfigError,
    DataDir,
    PipelineConfig,
    StageError,
    UnknownEntity,
    inspect_entity,
    load_snapshot,
    open_server,
    run_pipeline,
    run_stages,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
STAGE_VERBS = ("ingest", "construct", "views", "embed", "live-build")
VERBS = STAGE_VERBS + ("serve", "inspect", "run")

log = logging.getLogger("kgplatform.cli")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from overwriting ones given before the verb
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON (default pipeline.json)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override linking and embedding seeds")
    common.add_argument("--report", default=argparse.SUPPRESS, help="run report path (default <data_dir>/run-report.json)")
    common.add_argument("--since-lsn", type=int, default=argparse.SUPPRESS,
                        help="refresh views for entities changed after this LSN")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="kgp", description="Run pipeline stages, serve the live endpoint, inspect entity provenance.", parents=[common])
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "ingest": "import, transform, align and diff every source",
        "construct": "link and fuse pending deltas, replay curations, append to the log, replay stores",
        "views": "refresh the view catalog incrementally from the log",
        "embed": "retrain embedding models and write the fact audit list",
        "live-build": "rebuild the serving indexes",
        "serve": "answer line-delimited JSON requests over TCP",
        "inspect": "print an entity's facts with provenance and same_as lineage",
        "run": "ingest, construct, views, embed and live-build in order",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common], help=helps[verb])
        if verb == "inspect":
            p.add_argument("entity", help="graph id (akg:...) or source id (source:local)")
        if verb == "serve":
            p.add_argument("--port", type=int, default=None, help="override the configured port")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(getattr(args, "config", "pipeline.json"))
    seed = getattr(args, "seed", None)
    return cfg.with_seed(seed) if seed is not None else cfg


def _summary(report: dict) -> dict:
    keep = ("seconds", "skipped", "fact_changes", "facts", "entities", "kg_version", "lsn", "log_head",
            "freshness_lsn", "executions")
    return {"fact_changes": report["fact_changes"], "total_seconds": report["total_seconds"],
            "stages": {name: {k: v for k, v in rec.items() if k in keep} for name, rec in report["stages"].items()}}


def _serve(cfg: PipelineConfig, port: Optional[int]) -> int:
    server = open_server(cfg, port)
    host, bound = server.server_address[:2]
    print(f"serving on {host}:{bound} (freshness lsn {server.service.indexes.lsn})", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    verbosity = getattr(args, "verbose", 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(verbosity, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        since = getattr(args, "since_lsn", None)
        report_path = getattr(args, "report", None)
        if args.verb == "run":
            report = run_pipeline(cfg, since, report_path)
        elif args.verb in STAGE_VERBS:
            report = run_stages(cfg, [args.verb], since, report_path)
        elif args.verb == "serve":
            return _serve(cfg, args.port)
        else:
            try:
                out = inspect_entity(load_snapshot(DataDir(cfg.data_dir).kg), args.entity)
            except UnknownEntity as exc:
                raise StageError("inspect", str(exc)) from exc
            print(json.dumps(out, indent=2, ensure_ascii=False))
            return EXIT_OK
    except ConfigError as exc:
        print(f"kgp: stage config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"kgp: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(_summary(report), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
