"""Height-partitioned place database and the compact height database.

Heights are split into half-open levels ``[h_min, h_max)`` of fixed width
(50 m by default). Level indices are 1-based. Place entries are routed to the
sub-database of their capture height; the height database stores a handful of
height descriptors per level together with their height labels.
"""

from __future__ import annotations

import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import ChecksumError, ConfigError, InputError, LoadError, RangeError
from .formats import BinaryReader, write_atomic

log = logging.getLogger(__name__)

PLACE_DB_MAGIC = b"HEVB"
HEIGHT_DB_MAGIC = b"HEVH"
DB_VERSION = 1
DEFAULT_INTERVAL_M = 50.0
_HEADER = "<4sIIfff"


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    image_width_px: int

    def __post_init__(self):
        if not self.focal_px > 0 or not self.image_width_px > 0:
            raise ConfigError("focal length and image width must be positive")


def height_to_ground_width(height_m: float, intrinsics: CameraIntrinsics) -> float:
    """Pinhole ground footprint width: ``h * image_width_px / focal_px``."""
    if not height_m > 0:
        raise InputError(f"height must be positive, got {height_m}")
    return height_m * intrinsics.image_width_px / intrinsics.focal_px


@dataclass(frozen=True)
class HeightLevel:
    index: int
    h_min: float
    h_max: float
    ground_width_min: float | None = None
    ground_width_max: float | None = None


@dataclass(frozen=True)
class Partition:
    """Tiling of ``[range_min, range_max)`` into equal height intervals."""

    range_min: float
    range_max: float
    interval: float = DEFAULT_INTERVAL_M

    def __post_init__(self):
        # stored as float32 on disk; keep the in-memory values identical
        for name in ("range_min", "range_max", "interval"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        if not (self.interval > 0 and self.range_max > self.range_min):
            raise ConfigError(
                f"invalid partition: range [{self.range_min}, {self.range_max}), interval {self.interval}"
            )
        span = (self.range_max - self.range_min) / self.interval
        if abs(span - round(span)) > 1e-9 * max(1.0, span):
            raise ConfigError(
                f"interval {self.interval} m does not divide the range span "
                f"{self.range_max - self.range_min} m"
            )

    @property
    def num_levels(self) -> int:
        return int(round((self.range_max - self.range_min) / self.interval))

    def bounds(self, level: int) -> tuple[float, float]:
        lo = self.range_min + (level - 1) * self.interval
        hi = self.range_max if level == self.num_levels else self.range_min + level * self.interval
        return lo, hi

    def levels(self, intrinsics: CameraIntrinsics | None = None) -> list[HeightLevel]:
        out = []
        for index in range(1, self.num_levels + 1):
            lo, hi = self.bounds(index)
            widths = (None, None)
            if intrinsics is not None and lo > 0:
                widths = (height_to_ground_width(lo, intrinsics), height_to_ground_width(hi, intrinsics))
            out.append(HeightLevel(index, lo, hi, *widths))
        return out

    def center(self, level: int) -> float:
        lo, hi = self.bounds(level)
        return 0.5 * (lo + hi)

    def contains(self, height_m: float) -> bool:
        return self.range_min <= height_m < self.range_max


def height_to_level(height_m: float, partition: Partition) -> int:
    """1-based index of the level with ``h_min <= h < h_max``."""
    if not partition.contains(height_m):
        raise RangeError(
            f"height {height_m} m is outside the partition range "
            f"[{partition.range_min}, {partition.range_max}) m"
        )
    level = math.floor((height_m - partition.range_min) / partition.interval) + 1
    # guard against floating-point drift right below a boundary
    level = min(max(level, 1), partition.num_levels)
    lo, hi = partition.bounds(level)
    if height_m < lo:
        level -= 1
    elif height_m >= hi:
        level += 1
    return level


def ground_width_to_level(width_m: float, partition: Partition, intrinsics: CameraIntrinsics) -> int:
    """Level lookup done in footprint-width space instead of height space."""
    edges = [height_to_ground_width(partition.range_min, intrinsics)]
    edges += [height_to_ground_width(lvl.h_max, intrinsics) for lvl in partition.levels()]
    if not edges[0] <= width_m < edges[-1]:
        raise RangeError(
            f"ground width {width_m} m is outside [{edges[0]}, {edges[-1]}) m for this camera"
        )
    return int(np.searchsorted(np.asarray(edges), width_m, side="right"))


@dataclass(frozen=True)
class PlaceEntry:
    """Database input record; ``height_m`` decides the sub-database."""

    id: int
    descriptor: np.ndarray
    east: float
    north: float
    height_m: float


@dataclass(frozen=True, eq=False)
class SubDatabase:
    level: int
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.uint64).reshape(-1))
        object.__setattr__(
            self, "positions", np.asarray(self.positions, dtype=np.float32).reshape(-1, 2)
        )
        descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if descriptors.ndim != 2 or descriptors.shape[0] != len(self.ids) or len(self.positions) != len(self.ids):
            raise InputError("sub-database columns have inconsistent lengths")
        object.__setattr__(self, "descriptors", descriptors)
        for arr in (self.ids, self.positions, self.descriptors):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, SubDatabase):
            return NotImplemented
        return self.level == other.level and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in (
                (self.ids, other.ids),
                (self.positions, other.positions),
                (self.descriptors, other.descriptors),
            )
        )


@dataclass(frozen=True, eq=False)
class HeightPartitionedDatabase:
    partition: Partition
    sub_dbs: tuple[SubDatabase, ...]

    def __post_init__(self):
        object.__setattr__(self, "sub_dbs", tuple(self.sub_dbs))
        if len(self.sub_dbs) != self.partition.num_levels:
            raise InputError(
                f"{len(self.sub_dbs)} sub-databases for {self.partition.num_levels} levels"
            )
        for expected, sub in enumerate(self.sub_dbs, start=1):
            if sub.level != expected:
                raise InputError(f"sub-database {expected} is labelled level {sub.level}")
        dims = {sub.descriptors.shape[1] for sub in self.sub_dbs if len(sub)}
        if len(dims) > 1:
            raise InputError(f"mixed descriptor dims {sorted(dims)}")
        ids = np.concatenate([sub.ids for sub in self.sub_dbs])
        if len(np.unique(ids)) != len(ids):
            raise InputError("place ids must be unique across the database")

    @property
    def num_levels(self) -> int:
        return len(self.sub_dbs)

    @property
    def total_count(self) -> int:
        return sum(len(sub) for sub in self.sub_dbs)

    @property
    def sizes(self) -> list[int]:
        return [len(sub) for sub in self.sub_dbs]

    @property
    def dim(self) -> int:
        return max((sub.descriptors.shape[1] for sub in self.sub_dbs), default=0)

    def level(self, index: int) -> SubDatabase:
        if not 1 <= index <= self.num_levels:
            raise RangeError(f"level {index} outside 1..{self.num_levels}")
        return self.sub_dbs[index - 1]

    def union(self, levels: Iterable[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate the selected sub-databases in ascending level order."""
        subs = [self.level(lvl) for lvl in sorted(set(levels))]
        dim = self.dim
        if not subs:
            return (np.empty(0, np.uint64), np.empty((0, 2), np.float32), np.empty((0, dim), np.float32))
        return (
            np.concatenate([s.ids for s in subs]),
            np.concatenate([s.positions for s in subs]),
            np.concatenate([s.descriptors.reshape(len(s), dim) for s in subs]),
        )

    @cached_property
    def _positions_by_id(self) -> dict[int, tuple[float, float]]:
        return {
            int(i): (float(p[0]), float(p[1]))
            for sub in self.sub_dbs
            for i, p in zip(sub.ids, sub.positions)
        }

    def position_of(self, record_id: int) -> tuple[float, float]:
        return self._positions_by_id[int(record_id)]

    def __eq__(self, other):
        if not isinstance(other, HeightPartitionedDatabase):
            return NotImplemented
        return self.partition == other.partition and self.sub_dbs == other.sub_dbs


def build_partitioned_db(
    entries: Iterable[PlaceEntry], partition: Partition, *, strict: bool = False
) -> tuple[HeightPartitionedDatabase, list[int]]:
    """Route entries to their height level, keeping insertion order within a level.

    Returns the database and the ids rejected for lying outside the partition
    range (``strict=True`` raises instead).
    """
    buckets: list[list[PlaceEntry]] = [[] for _ in range(partition.num_levels)]
    rejected: list[int] = []
    dim = None
    for entry in entries:
        if not partition.contains(entry.height_m):
            rejected.append(int(entry.id))
            continue
        vec = np.asarray(entry.descriptor, dtype=np.float32).reshape(-1)
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise InputError(f"entry {entry.id} has descriptor dim {vec.shape[0]}, expected {dim}")
        buckets[height_to_level(entry.height_m, partition) - 1].append(entry)
    if rejected and strict:
        raise RangeError(
            f"ids {rejected} have heights outside [{partition.range_min}, {partition.range_max}) m"
        )
    dim = dim or 0
    subs = []
    for level, bucket in enumerate(buckets, start=1):
        subs.append(
            SubDatabase(
                level=level,
                ids=np.array([e.id for e in bucket], dtype=np.uint64),
                positions=np.array([(e.east, e.north) for e in bucket], dtype=np.float32).reshape(-1, 2),
                descriptors=np.array(
                    [np.asarray(e.descriptor, np.float32).reshape(-1) for e in bucket], dtype=np.float32
                ).reshape(len(bucket), dim),
            )
        )
    return HeightPartitionedDatabase(partition, tuple(subs)), rejected


@dataclass(frozen=True, eq=False)
class HeightDatabase:
    """Compact set of height descriptors with their height labels.

    Entries are kept grouped by level (stable within a level) so the on-disk
    layout, which is sectioned by level, round-trips exactly.
    """

    partition: Partition
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.float32).reshape(-1)
        descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if descriptors.ndim != 2 or not len(ids) == len(positions) == len(labels) == len(descriptors):
            raise InputError("height database columns have inconsistent lengths")
        if len(np.unique(ids)) != len(ids):
            raise InputError("height database ids must be unique")
        levels = np.array([height_to_level(float(h), self.partition) for h in labels], dtype=np.int64)
        order = np.argsort(levels, kind="stable")
        for name, arr in (("ids", ids), ("positions", positions), ("descriptors", descriptors), ("labels", labels)):
            arr = np.ascontiguousarray(arr[order])
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_levels", levels[order])

    def __len__(self):
        return len(self.ids)

    @property
    def entry_levels(self) -> np.ndarray:
        return self._levels

    def __eq__(self, other):
        if not isinstance(other, HeightDatabase):
            return NotImplemented
        return self.partition == other.partition and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in (
                (self.ids, other.ids),
                (self.positions, other.positions),
                (self.descriptors, other.descriptors),
                (self.labels, other.labels),
            )
        )


def sample_per_level(
    ids: Sequence[int],
    heights: Sequence[float],
    partition: Partition,
    per_level: int = 5,
    seed: int = 0,
) -> list[int]:
    """Seeded choice of at most ``per_level`` ids from every level; original order kept."""
    if per_level < 1:
        raise ConfigError("per-level sample cap must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EE7]))
    by_level: dict[int, list[int]] = {}
    for row, h in enumerate(heights):
        if partition.contains(float(h)):
            by_level.setdefault(height_to_level(float(h), partition), []).append(row)
    chosen: list[int] = []
    for level in sorted(by_level):
        rows = by_level[level]
        if len(rows) > per_level:
            rows = sorted(rng.choice(rows, size=per_level, replace=False).tolist())
        chosen.extend(rows)
    return [int(ids[row]) for row in sorted(chosen)]


def warn_if_not_compact(hdb: HeightDatabase, db: HeightPartitionedDatabase) -> bool:
    compact = len(hdb) < db.total_count
    if not compact:
        log.warning(
            "height database has %d entries, not fewer than the %d place entries",
            len(hdb),
            db.total_count,
        )
    return compact


# on-disk format -----------------------------------------------------------


def _record_dtype(dim: int, labelled: bool) -> np.dtype:
    fields = [("id", "<u8"), ("east", "<f4"), ("north", "<f4"), ("dim", "<u4"), ("desc", "<f4", (dim,))]
    if labelled:
        fields.append(("label", "<f4"))
    return np.dtype(fields)


def _encode_sections(magic, partition, groups, labelled) -> bytes:
    header = struct.pack(
        _HEADER, magic, DB_VERSION, partition.num_levels,
        partition.interval, partition.range_min, partition.range_max,
    )
    sections, crcs = [], []
    for ids, positions, descriptors, labels in groups:
        dim = descriptors.shape[1] if descriptors.ndim == 2 else 0
        records = np.zeros(len(ids), dtype=_record_dtype(dim, labelled))
        records["id"] = ids
        records["east"] = positions[:, 0]
        records["north"] = positions[:, 1]
        records["dim"] = dim
        records["desc"] = descriptors.reshape(len(ids), dim)
        if labelled:
            records["label"] = labels
        body = struct.pack("<Q", len(ids)) + records.tobytes()
        sections.append(body)
        crcs.append(zlib.crc32(body))
    return header + b"".join(sections) + struct.pack(f"<{len(crcs)}I", *crcs)


def _decode_sections(data: bytes, magic: bytes, name: str, labelled: bool):
    reader = BinaryReader(data, name)
    reader.expect_header(magic, DB_VERSION)
    num_levels, interval, range_min, range_max = reader.unpack("Ifff")
    try:
        partition = Partition(float(range_min), float(range_max), float(interval))
    except ConfigError as exc:
        raise LoadError(f"{name}: corrupt partition header ({exc})") from None
    if partition.num_levels != num_levels:
        raise LoadError(f"{name}: header declares {num_levels} levels, partition implies {partition.num_levels}")
    groups, bodies = [], []
    for _ in range(num_levels):
        start = reader.pos
        (count,) = reader.unpack("Q")
        dim = 0
        if count:
            # every record repeats the dim; read it from the first one
            peek = BinaryReader(data[reader.pos :], name)
            peek.take(16)
            (dim,) = peek.unpack("I")
        dtype = _record_dtype(dim, labelled)
        raw = reader.take(count * dtype.itemsize)
        records = np.frombuffer(raw, dtype=dtype)
        if count and np.any(records["dim"] != dim):
            raise LoadError(f"{name}: inconsistent descriptor dims inside a level")
        groups.append(records)
        bodies.append(data[start : reader.pos])
    crcs = reader.unpack(f"{num_levels}I")
    if reader.remaining:
        raise LoadError(f"{name}: {reader.remaining} trailing bytes after footer")
    for level, (body, crc) in enumerate(zip(bodies, crcs), start=1):
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{name}: CRC mismatch in level {level}")
    dims = {g["desc"].shape[1] for g in groups if len(g)}
    if len(dims) > 1:
        raise LoadError(f"{name}: mixed descriptor dims {sorted(dims)}")
    dim = dims.pop() if dims else 0
    return partition, groups, dim


def encode_db(db: HeightPartitionedDatabase) -> bytes:
    groups = [(s.ids, s.positions, s.descriptors, None) for s in db.sub_dbs]
    return _encode_sections(PLACE_DB_MAGIC, db.partition, groups, labelled=False)


def decode_db(data: bytes, name: str = "<buffer>") -> HeightPartitionedDatabase:
    partition, groups, dim = _decode_sections(data, PLACE_DB_MAGIC, name, labelled=False)
    subs = [
        SubDatabase(
            level=level,
            ids=g["id"].copy(),
            positions=np.stack([g["east"], g["north"]], axis=1).reshape(-1, 2),
            descriptors=g["desc"].reshape(len(g), dim).copy(),
        )
        for level, g in enumerate(groups, start=1)
    ]
    return HeightPartitionedDatabase(partition, tuple(subs))


def save_db(path: str | os.PathLike, db: HeightPartitionedDatabase) -> None:
    write_atomic(path, encode_db(db))


def load_db(path: str | os.PathLike) -> HeightPartitionedDatabase:
    with open(path, "rb") as fh:
        return decode_db(fh.read(), str(path))


def encode_height_db(hdb: HeightDatabase) -> bytes:
    groups = []
    for level in range(1, hdb.partition.num_levels + 1):
        rows = hdb.entry_levels == level
        groups.append((hdb.ids[rows], hdb.positions[rows], hdb.descriptors[rows], hdb.labels[rows]))
    return _encode_sections(HEIGHT_DB_MAGIC, hdb.partition, groups, labelled=True)


def decode_height_db(data: bytes, name: str = "<buffer>") -> HeightDatabase:
    partition, groups, dim = _decode_sections(data, HEIGHT_DB_MAGIC, name, labelled=True)
    records = [g for g in groups if len(g)]
    if not records:
        return HeightDatabase(partition, [], np.empty((0, 2)), np.empty((0, dim), np.float32), [])
    merged = np.concatenate(records)
    return HeightDatabase(
        partition,
        ids=merged["id"],
        positions=np.stack([merged["east"], merged["north"]], axis=1),
        descriptors=merged["desc"].reshape(len(merged), dim),
        labels=merged["label"],
    )


def save_height_db(path: str | os.PathLike, hdb: HeightDatabase) -> None:
    write_atomic(path, encode_height_db(hdb))


def load_height_db(path: str | os.PathLike) -> HeightDatabase:
    with open(path, "rb") as fh:
        return decode_height_db(fh.read(), str(path))
