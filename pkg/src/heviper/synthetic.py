"""Seeded multi-height aerial corpus.

Every place gets a value-noise terrain raster. A view from height ``h`` is the
centred square crop whose side is proportional to the ground footprint width at
``h`` (pinhole model), resampled to a fixed image size. Low views therefore
magnify the centre while high views see wide context, and all views of a place
share the same centre content.

Database images sit at each level's centre height; query images use the same
places with heights jittered uniformly by ``height_jitter_m``. With
``separable=True`` the generator also writes injected descriptor files in which
height descriptors are per-level orthogonal and place descriptors combine a
place direction with a level direction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import RunConfig
from .database import height_to_ground_width, height_to_level
from .descriptor import DescriptorSet, l2_normalize, save_descriptors
from .imageio import write_image

MANIFEST_COLUMNS = ("id", "path", "height_m", "east_m", "north_m")


@dataclass(frozen=True)
class CropRect:
    """Square crop in base-raster pixel coordinates, ``[x0, x1) x [y0, y1)``."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def overlap(self, other: "CropRect") -> float:
        """Intersection over union."""
        inter = CropRect(
            max(self.x0, other.x0), max(self.y0, other.y0), min(self.x1, other.x1), min(self.y1, other.y1)
        ).area
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class SyntheticRecord:
    id: int
    place: int
    level: int
    height_m: float
    east_m: float
    north_m: float
    path: str


@dataclass(frozen=True)
class SyntheticCorpus:
    root: Path
    database: list[SyntheticRecord]
    queries: list[SyntheticRecord]

    @property
    def db_manifest(self) -> Path:
        return self.root / "db_manifest.csv"

    @property
    def query_manifest(self) -> Path:
        return self.root / "query_manifest.csv"

    def descriptor_path(self, name: str) -> Path:
        return self.root / "descriptors" / f"{name}.hevd"


def value_noise(size: int, rng: np.random.Generator, octaves=(4, 8, 16, 32)) -> np.ndarray:
    """Multi-octave value noise in [0, 1] on a ``size x size`` grid."""
    out = np.zeros((size, size))
    weight = 1.0
    for res in octaves:
        coarse = rng.random((res + 1, res + 1))
        scale = (size - 1) / res
        coords = np.arange(size) / scale
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        out += weight * ndimage.map_coordinates(coarse, [yy, xx], order=1, mode="nearest")
        weight *= 0.5
    out -= out.min()
    return out / out.max()


def footprint_rect(height_m: float, config: RunConfig) -> CropRect:
    """Crop of the base raster seen from ``height_m``; the top of the range sees it all."""
    intr = config.camera.build()
    base = config.synthetic.base_size
    full = height_to_ground_width(config.partition.range_max_m, intr)
    side = base * height_to_ground_width(height_m, intr) / full
    lo = (base - side) / 2
    return CropRect(lo, lo, lo + side, lo + side)


def render_view(terrain: np.ndarray, rect: CropRect, size: int) -> np.ndarray:
    step = (rect.x1 - rect.x0) / size
    coords = rect.x0 + (np.arange(size) + 0.5) * step - 0.5
    ycoords = rect.y0 + (np.arange(size) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(ycoords, coords, indexing="ij")
    view = ndimage.map_coordinates(terrain, [yy, xx], order=1, mode="nearest")
    return np.clip(np.round(view * 255.0), 0, 255).astype(np.uint8)


def _place_position(place: int, places: int, spacing: float) -> tuple[float, float]:
    cols = math.ceil(math.sqrt(places))
    return (place % cols) * spacing, (place // cols) * spacing


def write_manifest(path: Path, records: list[SyntheticRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.id, r.path, repr(r.height_m), repr(r.east_m), repr(r.north_m)])


def generate(config: RunConfig, out_dir: str | Path, *, images: bool = True) -> SyntheticCorpus:
    """Write a corpus of ``places x levels`` database views plus one query per view."""
    out = Path(out_dir)
    syn = config.synthetic
    partition = config.partition.build()
    levels = partition.num_levels
    seed = config.seed

    jitter_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E16]))
    database, queries = [], []
    terrains = []
    for place in range(syn.places):
        terrain_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E44, place]))
        terrains.append(value_noise(syn.base_size, terrain_rng))
        east, north = _place_position(place, syn.places, syn.place_spacing_m)
        for level in range(1, levels + 1):
            record_id = 1 + place * levels + (level - 1)
            center = partition.center(level)
            lo, hi = partition.bounds(level)
            jittered = center + jitter_rng.uniform(-syn.height_jitter_m, syn.height_jitter_m)
            jittered = float(min(max(jittered, lo), np.nextafter(hi, lo)))
            database.append(
                SyntheticRecord(record_id, place, level, center, east, north, f"images/db_{record_id:05d}.pgm")
            )
            queries.append(
                SyntheticRecord(record_id, place, level, jittered, east, north, f"images/q_{record_id:05d}.pgm")
            )

    if images:
        for rec in database + queries:
            view = render_view(terrains[rec.place], footprint_rect(rec.height_m, config), syn.image_size)
            write_image(out / rec.path, view)
    write_manifest(out / "db_manifest.csv", database)
    write_manifest(out / "query_manifest.csv", queries)
    corpus = SyntheticCorpus(out, database, queries)
    if syn.separable:
        _write_separable_descriptors(config, corpus)
    return corpus


def separable_descriptors(config: RunConfig, corpus: SyntheticCorpus) -> dict[str, DescriptorSet]:
    """Height descriptors that are orthogonal across levels; place descriptors mix place and level."""
    syn = config.synthetic
    dim = syn.descriptor_dim
    partition = config.partition.build()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDE5C]))
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    level_dirs = basis.T[: partition.num_levels]
    place_dirs = l2_normalize(rng.standard_normal((syn.places, dim)))

    out = {}
    for prefix, records in (("db", corpus.database), ("query", corpus.queries)):
        height_rows, place_rows = [], []
        for rec in records:
            level_dir = level_dirs[height_to_level(rec.height_m, partition) - 1]
            height_rows.append(level_dir + syn.noise * rng.standard_normal(dim))
            place_rows.append(
                place_dirs[rec.place] + syn.level_weight * level_dir + syn.noise * rng.standard_normal(dim)
            )
        ids = [rec.id for rec in records]
        out[f"{prefix}_height"] = DescriptorSet(ids, l2_normalize(np.array(height_rows)))
        out[f"{prefix}_place"] = DescriptorSet(ids, l2_normalize(np.array(place_rows)))
    return out


def _write_separable_descriptors(config: RunConfig, corpus: SyntheticCorpus) -> None:
    for name, descriptors in separable_descriptors(config, corpus).items():
        save_descriptors(corpus.descriptor_path(name), descriptors)
