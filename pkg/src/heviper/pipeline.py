"""Glue between manifests, descriptor sources, databases and evaluation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .adapter import AdapterParams, BranchId, init_branch_params, load_adapter_weights
from .config import RunConfig
from .database import (
    HeightDatabase,
    HeightPartitionedDatabase,
    PlaceEntry,
    build_partitioned_db,
    sample_per_level,
    warn_if_not_compact,
)
from .descriptor import (
    Aggregator,
    BackboneStub,
    DescriptorSet,
    extract_height_descriptor,
    extract_place_descriptor,
)
from .errors import ConfigError, EmptySearchSpaceError, InputError, SchemaError
from .imageio import read_image
from .metrics import (
    RATIO_NS,
    EvalReport,
    HeightReport,
    MethodReport,
    avg_height_error,
    height_recall_table,
    memory_usage_pct,
    performance_ratio_pct,
    recall_table,
)
from .retrieval import (
    HEVPRSystem,
    QueryDescriptors,
    QueryResult,
    RankedList,
    estimate_height,
    full_query,
    he_vpr_query,
    oracle_query,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

MANIFEST_COLUMNS = ("id", "path", "height_m", "east_m", "north_m")


@dataclass(frozen=True)
class ManifestRow:
    id: int
    path: Path
    height_m: float
    east_m: float
    north_m: float


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse an ``id,path,height_m,east_m,north_m`` CSV; paths are relative to the file."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise SchemaError(f"{path}: missing manifest columns {missing}")
            rows = []
            for line, raw in enumerate(reader, start=2):
                try:
                    row = ManifestRow(
                        id=int(raw["id"]),
                        path=path.parent / raw["path"],
                        height_m=float(raw["height_m"]),
                        east_m=float(raw["east_m"]),
                        north_m=float(raw["north_m"]),
                    )
                except (TypeError, ValueError) as exc:
                    raise SchemaError(f"{path}:{line}: {exc}") from None
                if not 0 <= row.id < 2**64:
                    raise InputError(f"{path}:{line}: id {row.id} does not fit in u64")
                if not row.height_m > 0:
                    raise InputError(f"{path}:{line}: height must be positive")
                rows.append(row)
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from None
    ids = [r.id for r in rows]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate ids in manifest")
    return rows


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Map in parallel threads, returning results in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def make_stub(config: RunConfig) -> BackboneStub:
    a = config.adapter
    return BackboneStub(config.seed, a.blocks, a.dim, a.patch_size, a.stub_cells)


def load_branch(config: RunConfig, branch: BranchId, path: str | None = None) -> list[AdapterParams]:
    a = config.adapter
    mask = branch is BranchId.VPR
    path = path or (a.he_weights if branch is BranchId.HE else a.vpr_weights)
    if path:
        params = load_adapter_weights(path, mask_enabled=mask)
        if len(params) != a.blocks or params[0].dim != a.dim:
            raise ConfigError(
                f"{path}: weights for {len(params)} blocks of dim {params[0].dim}, "
                f"config expects {a.blocks} blocks of dim {a.dim}"
            )
        return params
    return init_branch_params(
        a.blocks, a.dim, a.bottleneck, dilation=a.dilation, seed=config.seed, branch=branch, mask_enabled=mask
    )


def aggregator_for(config: RunConfig) -> Aggregator:
    return Aggregator.parse(config.retrieval.aggregator, config.retrieval.gem_p)


def place_descriptors_for(
    rows: Sequence[ManifestRow],
    config: RunConfig,
    injected: DescriptorSet | None = None,
    workers: int = 1,
) -> list[np.ndarray]:
    if injected is not None:
        return [injected.get(r.id) for r in rows]
    stub = make_stub(config)
    vpr = load_branch(config, BranchId.VPR)
    aggregator = aggregator_for(config)
    return ordered_map(
        lambda r: extract_place_descriptor(read_image(r.path), stub, vpr, aggregator), rows, workers
    )


def height_descriptors_for(
    rows: Sequence[ManifestRow],
    config: RunConfig,
    injected: DescriptorSet | None = None,
    workers: int = 1,
) -> list[np.ndarray]:
    if injected is not None:
        return [injected.get(r.id) for r in rows]
    stub = make_stub(config)
    he = load_branch(config, BranchId.HE)
    p = config.retrieval.gem_p
    return ordered_map(lambda r: extract_height_descriptor(read_image(r.path), stub, he, p), rows, workers)


def build_place_db(
    rows: Sequence[ManifestRow],
    config: RunConfig,
    descriptors: DescriptorSet | None = None,
    workers: int = 1,
) -> tuple[HeightPartitionedDatabase, list[int]]:
    if not rows:
        raise InputError("manifest is empty")
    partition = config.partition.build()
    in_range = [r for r in rows if partition.contains(r.height_m)]
    vectors = place_descriptors_for(in_range, config, descriptors, workers)
    by_id = {r.id: v for r, v in zip(in_range, vectors)}
    entries = [
        PlaceEntry(r.id, by_id.get(r.id, np.zeros(1, np.float32)), r.east_m, r.north_m, r.height_m)
        for r in rows
    ]
    db, rejected = build_partitioned_db(entries, partition)
    if rejected:
        log.warning("rejected %d out-of-range entries: ids %s", len(rejected), rejected)
    return db, rejected


def build_height_db(
    rows: Sequence[ManifestRow],
    config: RunConfig,
    descriptors: DescriptorSet | None = None,
    workers: int = 1,
) -> HeightDatabase:
    if not rows:
        raise InputError("height database source is empty")
    partition = config.partition.build()
    chosen = set(
        sample_per_level(
            [r.id for r in rows],
            [r.height_m for r in rows],
            partition,
            config.retrieval.height_samples_per_level,
            config.seed,
        )
    )
    picked = [r for r in rows if r.id in chosen]
    if not picked:
        raise InputError("no manifest rows fall inside the partition range")
    vectors = height_descriptors_for(picked, config, descriptors, workers)
    return HeightDatabase(
        partition,
        ids=[r.id for r in picked],
        positions=[(r.east_m, r.north_m) for r in picked],
        descriptors=np.array(vectors, dtype=np.float32),
        labels=[r.height_m for r in picked],
    )


def make_system(
    config: RunConfig,
    db: HeightPartitionedDatabase,
    hdb: HeightDatabase,
    workers: int = 1,
) -> HEVPRSystem:
    return HEVPRSystem(
        db=db,
        hdb=hdb,
        stub=make_stub(config),
        he_params=load_branch(config, BranchId.HE),
        vpr_params=load_branch(config, BranchId.VPR),
        aggregator=aggregator_for(config),
        height_p=config.retrieval.gem_p,
        workers=workers,
    )


def query_descriptors_for(
    rows: Sequence[ManifestRow],
    system: HEVPRSystem,
    height_set: DescriptorSet | None = None,
    place_set: DescriptorSet | None = None,
    workers: int = 1,
) -> list[QueryDescriptors]:
    """One descriptor pair per query; images go through a single backbone pass each."""
    if (height_set is None) != (place_set is None):
        raise ConfigError("inject both query height and place descriptors, or neither")
    if height_set is not None:
        return [QueryDescriptors(height_set.get(r.id), place_set.get(r.id)) for r in rows]
    return ordered_map(lambda r: system.describe(read_image(r.path)), rows, workers)


@dataclass
class _QueryOutcome:
    full: QueryResult
    he_vpr: dict[int, QueryResult | None]
    oracle: QueryResult | None
    heights: RankedList


def _run_one(system: HEVPRSystem, desc: QueryDescriptors, true_height: float, config: RunConfig) -> _QueryOutcome:
    k_place = max(config.eval.ns)
    outcome = _QueryOutcome(
        full=full_query(desc, system, k_place),
        he_vpr={},
        oracle=None,
        heights=estimate_height(desc.height, system.hdb, max(config.eval.ns)),
    )
    for k in config.eval.k_heights:
        try:
            outcome.he_vpr[k] = he_vpr_query(desc, system, k, k_place)
        except EmptySearchSpaceError as exc:
            log.warning("HE-VPR(%d): %s; counted as a miss", k, exc)
            outcome.he_vpr[k] = None
    if config.eval.include_oracle:
        try:
            outcome.oracle = oracle_query(desc, system, true_height, k_place)
        except EmptySearchSpaceError as exc:
            log.warning("oracle: %s; counted as a miss", exc)
    return outcome


def evaluate(
    config: RunConfig,
    system: HEVPRSystem,
    rows: Sequence[ManifestRow],
    height_set: DescriptorSet | None = None,
    place_set: DescriptorSet | None = None,
    workers: int = 1,
) -> EvalReport:
    """Full baseline, HE-VPR(k) for each configured k, optional oracle-height run."""
    if not rows:
        raise InputError("query manifest is empty")
    partition = system.db.partition
    outside = [r.id for r in rows if not partition.contains(r.height_m)]
    if outside:
        raise InputError(f"query ids {outside} have ground-truth heights outside the partition")

    descs = query_descriptors_for(rows, system, height_set, place_set, workers)
    outcomes = ordered_map(
        lambda item: _run_one(system, item[0], item[1].height_m, config), list(zip(descs, rows)), workers
    )

    ev = config.eval
    truth = np.array([(r.east_m, r.north_m) for r in rows])
    total = system.db.total_count

    def positions(result: QueryResult | None) -> np.ndarray:
        if result is None:
            return np.empty((0, 2))
        return np.array([system.db.position_of(i) for i in result.place_ranking.ids]).reshape(-1, 2)

    def method(results: list[QueryResult | None]) -> MethodReport:
        return MethodReport(
            recall=recall_table([positions(r) for r in results], truth, ev.ns, ev.thresholds_m),
            memory_usage_pct=memory_usage_pct([0 if r is None else r.searched_count for r in results], total),
        )

    report = EvalReport(
        queries=len(rows), ns=list(ev.ns), thresholds_m=list(ev.thresholds_m), ratio_threshold_m=ev.ratio_threshold_m
    )
    report.methods["full"] = method([o.full for o in outcomes])
    for k in ev.k_heights:
        report.methods[f"he-vpr({k})"] = method([o.he_vpr[k] for o in outcomes])
    if ev.include_oracle:
        report.methods["oracle"] = method([o.oracle for o in outcomes])

    if all(n in ev.ns for n in RATIO_NS):
        baseline = [report.methods["full"].recall[ev.ratio_threshold_m][n] for n in RATIO_NS]
        if sum(baseline) > 0:
            for m in report.methods.values():
                m.performance_ratio_pct = performance_ratio_pct(
                    [m.recall[ev.ratio_threshold_m][n] for n in RATIO_NS], baseline
                )

    labels = [o.heights.labels for o in outcomes]
    heights = [r.height_m for r in rows]
    report.height["he"] = HeightReport(
        recall=height_recall_table(labels, heights, ev.ns, ev.height_thresholds_m),
        e_avg_m=avg_height_error(labels, heights),
    )
    report.validate()
    return report


def summarize_db(db: HeightPartitionedDatabase, rejected: Iterable[int] = ()) -> dict:
    return {
        "levels": db.num_levels,
        "sizes": db.sizes,
        "total": db.total_count,
        "rejected_ids": list(rejected),
    }
