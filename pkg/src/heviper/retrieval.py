"""Exact nearest-neighbour search and the two-stage height-aware query.

Stage 1 retrieves height labels from the compact height database and maps the
top-k labels to a set of levels. Stage 2 ranks the union of the selected
sub-databases against the place descriptor. Scores are dot products of unit
descriptors (cosine similarity); ties are broken by ascending id so rankings
are fully deterministic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adapter import AdapterParams
from .database import HeightDatabase, HeightPartitionedDatabase, Partition, height_to_level
from .descriptor import Aggregator, BackboneStub, extract_descriptors, extract_place_descriptor
from .errors import ConfigError, EmptyPoolError, EmptySearchSpaceError, InputError, SchemaError

# Rows per scoring task when a scan is split across workers.
MIN_ROWS_PER_TASK = 2048


@dataclass(frozen=True, eq=False)
class RankedList:
    """Best-first (id, score) pairs, optionally with a height label per entry."""

    ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    def head(self, n: int) -> "RankedList":
        return RankedList(
            self.ids[:n], self.scores[:n], None if self.labels is None else self.labels[:n]
        )

    def __eq__(self, other):
        if not isinstance(other, RankedList):
            return NotImplemented
        same_labels = (self.labels is None) == (other.labels is None) and (
            self.labels is None or self.labels.tobytes() == other.labels.tobytes()
        )
        return (
            self.ids.tobytes() == other.ids.tobytes()
            and self.scores.tobytes() == other.scores.tobytes()
            and same_labels
        )

    def to_dict(self) -> dict:
        out = {"ids": [int(i) for i in self.ids], "scores": [float(s) for s in self.scores]}
        if self.labels is not None:
            out["labels"] = [float(h) for h in self.labels]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RankedList":
        labels = doc.get("labels")
        return cls(
            np.array(doc["ids"], dtype=np.uint64),
            np.array(doc["scores"], dtype=np.float64),
            None if labels is None else np.array(labels, dtype=np.float32),
        )

    @classmethod
    def empty(cls) -> "RankedList":
        return cls(np.empty(0, np.uint64), np.empty(0, np.float64))


def cosine_scores(query: np.ndarray, vectors: np.ndarray, workers: int = 1) -> np.ndarray:
    """Dot products of ``query`` with every row, accumulated in float64.

    Each row's score depends only on that row, so splitting the scan across
    workers yields bit-identical results to the sequential scan.
    """
    q = np.asarray(query, dtype=np.float32).astype(np.float64)
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[1] != q.shape[0]:
        raise ConfigError(f"query dim {q.shape[0]} does not match pool shape {vectors.shape}")

    def score(rows: slice) -> np.ndarray:
        return (vectors[rows].astype(np.float64) * q).sum(axis=1)

    n = vectors.shape[0]
    tasks = min(workers, math.ceil(n / MIN_ROWS_PER_TASK)) if n else 1
    if tasks <= 1:
        return score(slice(None))
    step = math.ceil(n / tasks)
    chunks = [slice(start, min(start + step, n)) for start in range(0, n, step)]
    with ThreadPoolExecutor(max_workers=tasks) as pool:
        return np.concatenate(list(pool.map(score, chunks)))


def rank(ids: np.ndarray, scores: np.ndarray, k: int, labels: np.ndarray | None = None) -> RankedList:
    """Exact top-k by descending score, ties by ascending id."""
    ids = np.asarray(ids, dtype=np.uint64)
    n = len(ids)
    k = min(int(k), n)
    candidates = np.arange(n)
    if k < n:
        # keep everything tied with the k-th score so the id tie-break stays exact
        kth = np.partition(-scores, k - 1)[k - 1]
        candidates = np.flatnonzero(-scores <= kth)
    order = candidates[np.lexsort((ids[candidates], -scores[candidates]))][:k]
    return RankedList(
        ids[order].copy(),
        scores[order].copy(),
        None if labels is None else np.asarray(labels)[order].copy(),
    )


def knn(
    query: np.ndarray,
    ids: np.ndarray,
    vectors: np.ndarray,
    k: int,
    *,
    labels: np.ndarray | None = None,
    workers: int = 1,
) -> RankedList:
    """Full-scan exact k nearest neighbours by cosine similarity."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ids = np.asarray(ids, dtype=np.uint64)
    if len(ids) == 0:
        raise EmptyPoolError("cannot search an empty pool")
    if len(ids) != len(vectors):
        raise InputError(f"{len(ids)} ids for {len(vectors)} vectors")
    return rank(ids, cosine_scores(query, vectors, workers), k, labels)


def estimate_height(query_hd: np.ndarray, hdb: HeightDatabase, k: int, *, workers: int = 1) -> RankedList:
    """Rank height-database entries; ``labels[0]`` is the point estimate."""
    if len(hdb) == 0:
        raise EmptyPoolError("height database is empty")
    return knn(query_hd, hdb.ids, hdb.descriptors, k, labels=hdb.labels, workers=workers)


def select_subdatabases(height_ranking: RankedList, k: int, partition: Partition) -> frozenset[int]:
    """Levels of the top-k height labels; duplicates collapse."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if height_ranking.labels is None:
        raise InputError("height ranking carries no labels")
    return frozenset(height_to_level(float(h), partition) for h in height_ranking.labels[:k])


@dataclass(frozen=True, eq=False)
class QueryResult:
    height_candidates: RankedList
    selected_levels: frozenset[int]
    place_ranking: RankedList
    searched_count: int

    def __eq__(self, other):
        if not isinstance(other, QueryResult):
            return NotImplemented
        return (
            self.height_candidates == other.height_candidates
            and self.selected_levels == other.selected_levels
            and self.place_ranking == other.place_ranking
            and self.searched_count == other.searched_count
        )

    def to_dict(self) -> dict:
        return {
            "height_candidates": self.height_candidates.to_dict(),
            "selected_levels": sorted(self.selected_levels),
            "place_ranking": self.place_ranking.to_dict(),
            "searched_count": self.searched_count,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QueryResult":
        try:
            return cls(
                RankedList.from_dict(doc["height_candidates"]),
                frozenset(int(level) for level in doc["selected_levels"]),
                RankedList.from_dict(doc["place_ranking"]),
                int(doc["searched_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed query result: {exc!r}") from None


@dataclass(frozen=True)
class QueryDescriptors:
    """Precomputed query descriptors, used instead of an image."""

    height: np.ndarray | None
    place: np.ndarray


@dataclass
class HEVPRSystem:
    """Everything a query needs: both databases and a way to describe images.

    ``stub``/``he_params``/``vpr_params`` are only required when queries are
    given as images; queries given as :class:`QueryDescriptors` skip extraction.
    """

    db: HeightPartitionedDatabase
    hdb: HeightDatabase
    stub: BackboneStub | None = None
    he_params: Sequence[AdapterParams] | None = None
    vpr_params: Sequence[AdapterParams] | None = None
    aggregator: Aggregator = field(default_factory=Aggregator)
    height_p: float = 3.0
    workers: int = 1

    def describe(self, query, *, need_height: bool = True) -> QueryDescriptors:
        if isinstance(query, QueryDescriptors):
            if need_height and query.height is None:
                raise InputError("query has no height descriptor")
            return query
        if self.stub is None or self.vpr_params is None or (need_height and self.he_params is None):
            raise ConfigError("system has no backbone/adapters loaded; pass QueryDescriptors instead")
        if not need_height:
            return QueryDescriptors(None, extract_place_descriptor(query, self.stub, self.vpr_params, self.aggregator))
        hd, pd = extract_descriptors(
            query, self.stub, self.he_params, self.vpr_params, self.aggregator, self.height_p
        )
        return QueryDescriptors(hd, pd)


def search_levels(
    place_desc: np.ndarray,
    db: HeightPartitionedDatabase,
    levels: Iterable[int],
    k: int,
    *,
    workers: int = 1,
) -> tuple[RankedList, int]:
    """Single global top-k over the union of the given sub-databases."""
    ids, _, vectors = db.union(levels)
    if len(ids) == 0:
        raise EmptySearchSpaceError(f"selected levels {sorted(set(levels))} hold no entries")
    return knn(place_desc, ids, vectors, k, workers=workers), len(ids)


def he_vpr_query(query, system: HEVPRSystem, k_height: int, k_place: int) -> QueryResult:
    desc = system.describe(query)
    heights = estimate_height(desc.height, system.hdb, k_height, workers=system.workers)
    levels = select_subdatabases(heights, k_height, system.db.partition)
    ranking, searched = search_levels(desc.place, system.db, levels, k_place, workers=system.workers)
    return QueryResult(heights, levels, ranking, searched)


def full_query(query, system: HEVPRSystem, k_place: int) -> QueryResult:
    """Baseline: rank the whole database, no height stage."""
    if system.db.total_count == 0:
        raise EmptySearchSpaceError("database is empty")
    desc = system.describe(query, need_height=False)
    levels = frozenset(range(1, system.db.num_levels + 1))
    ranking, searched = search_levels(desc.place, system.db, levels, k_place, workers=system.workers)
    return QueryResult(RankedList.empty(), levels, ranking, searched)


def oracle_query(query, system: HEVPRSystem, true_height_m: float, k_place: int) -> QueryResult:
    """Stage 2 only, searching the sub-database of the true height."""
    desc = system.describe(query, need_height=False)
    levels = frozenset([height_to_level(true_height_m, system.db.partition)])
    ranking, searched = search_levels(desc.place, system.db, levels, k_place, workers=system.workers)
    return QueryResult(RankedList.empty(), levels, ranking, searched)
