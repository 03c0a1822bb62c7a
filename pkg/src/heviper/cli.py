"""Command-line entry point: ``heviper <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 empty search space.
The log level is read from the ``HEVIPER_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline, synthetic
from .config import RunConfig
from .database import load_db, load_height_db, save_db, save_height_db, warn_if_not_compact
from .descriptor import load_descriptors
from .errors import ConfigError, HeviperError
from .formats import write_atomic
from .imageio import read_image
from .retrieval import QueryDescriptors, full_query, he_vpr_query

log = logging.getLogger("heviper")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument(
        "--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker threads"
    )
    parser.add_argument(
        "--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="machine-readable output on stdout",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heviper", description="Height-aware aerial place recognition")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("build-db", parents=[common], help="build the height-partitioned place database")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--descriptors", help="injected place descriptors (HEVD) instead of the stub")

    p = sub.add_parser("build-height-db", parents=[common], help="build the compact height database")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--descriptors", help="injected height descriptors (HEVD) instead of the stub")
    p.add_argument("--db", help="place database, for the compactness check")

    p = sub.add_parser("query", parents=[common], help="run one query through the pipeline")
    p.add_argument("image", nargs="?", help="PGM/PPM raster or .npy float32 grid")
    p.add_argument("--db", required=True)
    p.add_argument("--height-db", required=True)
    p.add_argument("--k-height", type=int)
    p.add_argument("--k-place", type=int)
    p.add_argument("--full", action="store_true", help="skip height estimation and search everything")
    p.add_argument("--id", type=int, help="record id to look up in the injected descriptor files")
    p.add_argument("--height-descriptors")
    p.add_argument("--place-descriptors")
    p.add_argument("--he-weights")
    p.add_argument("--vpr-weights")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a query manifest")
    p.add_argument("--queries", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--height-db", required=True)
    p.add_argument("--query-height-descriptors")
    p.add_argument("--query-place-descriptors")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--text", help="plain-text table path")
    p.add_argument("--csv", help="CSV path, one row per (N, threshold) cell")

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, help="override synthetic.places")
    p.add_argument("--no-images", action="store_true", help="write manifests and descriptors only")
    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return config.validate()


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    else:
        sys.stdout.write(text)


def cmd_build_db(args, config: RunConfig) -> int:
    rows = pipeline.read_manifest(args.manifest)
    injected = load_descriptors(args.descriptors) if args.descriptors else None
    db, rejected = pipeline.build_place_db(rows, config, injected, args.threads)
    save_db(args.out, db)
    summary = pipeline.summarize_db(db, rejected)
    lines = [f"level {i:>3}: {n}" for i, n in enumerate(db.sizes, start=1)]
    lines.append(f"total: {db.total_count}  rejected: {rejected}")
    _emit(args, summary, "\n".join(lines) + "\n")
    return 0


def cmd_build_height_db(args, config: RunConfig) -> int:
    rows = pipeline.read_manifest(args.manifest)
    injected = load_descriptors(args.descriptors) if args.descriptors else None
    hdb = pipeline.build_height_db(rows, config, injected, args.threads)
    compact = True
    if args.db:
        compact = warn_if_not_compact(hdb, load_db(args.db))
    save_height_db(args.out, hdb)
    counts = [int((hdb.entry_levels == lvl).sum()) for lvl in range(1, hdb.partition.num_levels + 1)]
    summary = {"entries": len(hdb), "per_level": counts, "compact": compact}
    _emit(args, summary, f"height entries: {len(hdb)}\nper level: {counts}\n")
    return 0


def cmd_query(args, config: RunConfig) -> int:
    if args.he_weights:
        config.adapter.he_weights = args.he_weights
    if args.vpr_weights:
        config.adapter.vpr_weights = args.vpr_weights
    db = load_db(args.db)
    hdb = load_height_db(args.height_db)
    system = pipeline.make_system(config, db, hdb, args.threads)
    if args.id is not None:
        if not args.place_descriptors or (not args.full and not args.height_descriptors):
            raise ConfigError("--id needs --place-descriptors (and --height-descriptors unless --full)")
        height = load_descriptors(args.height_descriptors).get(args.id) if args.height_descriptors else None
        query = QueryDescriptors(height, load_descriptors(args.place_descriptors).get(args.id))
    elif args.image:
        query = read_image(args.image)
    else:
        raise ConfigError("give an image path or --id with descriptor files")
    k_height = args.k_height or config.retrieval.k_height
    k_place = args.k_place or config.retrieval.k_place
    if args.full:
        result = full_query(query, system, k_place)
    else:
        result = he_vpr_query(query, system, k_height, k_place)

    lines = []
    hc = result.height_candidates
    if len(hc):
        lines.append("height candidates: " + ", ".join(f"{h:g} m ({s:.4f})" for h, s in zip(hc.labels, hc.scores)))
    lines.append(f"selected levels: {sorted(result.selected_levels)}")
    lines.append(f"searched entries: {result.searched_count} of {db.total_count}")
    for rank, (i, s) in enumerate(zip(result.place_ranking.ids, result.place_ranking.scores), start=1):
        east, north = db.position_of(i)
        lines.append(f"{rank:>3}. id {int(i)}  score {s:.6f}  at ({east:.1f}, {north:.1f})")
    _emit(args, result.to_dict(), "\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args, config: RunConfig) -> int:
    db = load_db(args.db)
    hdb = load_height_db(args.height_db)
    rows = pipeline.read_manifest(args.queries)
    height_set = load_descriptors(args.query_height_descriptors) if args.query_height_descriptors else None
    place_set = load_descriptors(args.query_place_descriptors) if args.query_place_descriptors else None
    system = pipeline.make_system(config, db, hdb)
    report = pipeline.evaluate(config, system, rows, height_set, place_set, args.threads)
    if args.out:
        write_atomic(args.out, report.to_json().encode())
    if args.text:
        write_atomic(args.text, report.to_text().encode())
    if args.csv:
        write_atomic(args.csv, report.to_csv().encode())
    _emit(args, report.to_dict(), report.to_text())
    return 0


def cmd_gen_synthetic(args, config: RunConfig) -> int:
    if args.places is not None:
        config.synthetic.places = args.places
        config.validate()
    corpus = synthetic.generate(config, args.out, images=not args.no_images)
    config_path = Path(args.out) / "config.toml"
    write_atomic(config_path, config.to_toml().encode())
    summary = {
        "root": str(corpus.root),
        "database_images": len(corpus.database),
        "query_images": len(corpus.queries),
        "levels": config.partition.build().num_levels,
        "places": config.synthetic.places,
        "config": str(config_path),
    }
    _emit(args, summary, "".join(f"{k}: {v}\n" for k, v in summary.items()))
    return 0


COMMANDS = {
    "build-db": cmd_build_db,
    "build-height-db": cmd_build_height_db,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get("HEVIPER_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        return COMMANDS[args.command](args, config)
    except HeviperError as exc:
        print(f"heviper: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"heviper: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
