"""Run configuration, read from and written to TOML."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .database import CameraIntrinsics, Partition
from .descriptor import Aggregator
from .errors import ConfigError


@dataclass
class PartitionConfig:
    range_min_m: float = 100.0
    range_max_m: float = 1200.0
    interval_m: float = 50.0

    def build(self) -> Partition:
        return Partition(self.range_min_m, self.range_max_m, self.interval_m)


@dataclass
class CameraConfig:
    focal_px: float = 224.0
    image_width_px: int = 224

    def build(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal_px, self.image_width_px)


@dataclass
class AdapterConfig:
    blocks: int = 4
    dim: int = 128
    bottleneck: int = 64
    dilation: int = 2
    patch_size: int = 14
    stub_cells: int = 2
    he_weights: str | None = None
    vpr_weights: str | None = None


@dataclass
class RetrievalConfig:
    k_height: int = 1
    k_place: int = 10
    aggregator: str = "gem"
    gem_p: float = 3.0
    height_samples_per_level: int = 5


@dataclass
class EvalConfig:
    thresholds_m: list[float] = field(default_factory=lambda: [100.0, 200.0])
    height_thresholds_m: list[float] = field(default_factory=lambda: [50.0, 100.0])
    ns: list[int] = field(default_factory=lambda: [1, 5, 10])
    k_heights: list[int] = field(default_factory=lambda: [1, 5, 10])
    ratio_threshold_m: float = 100.0
    include_oracle: bool = True


@dataclass
class SyntheticConfig:
    places: int = 10
    image_size: int = 112
    base_size: int = 256
    place_spacing_m: float = 1000.0
    height_jitter_m: float = 10.0
    separable: bool = True
    descriptor_dim: int = 64
    noise: float = 0.05
    level_weight: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> "RunConfig":
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        self.partition.build()
        self.camera.build()
        a = self.adapter
        if min(a.blocks, a.dim, a.bottleneck, a.dilation, a.patch_size, a.stub_cells) < 1:
            raise ConfigError("adapter sizes must be positive")
        if a.bottleneck >= a.dim:
            raise ConfigError(f"bottleneck {a.bottleneck} must be smaller than dim {a.dim}")
        if a.patch_size % a.stub_cells:
            raise ConfigError("patch_size must be divisible by stub_cells")
        r = self.retrieval
        if min(r.k_height, r.k_place, r.height_samples_per_level) < 1:
            raise ConfigError("k values and sample caps must be >= 1")
        Aggregator.parse(r.aggregator, r.gem_p)
        if not r.gem_p >= 1:
            raise ConfigError("gem_p must be >= 1")
        e = self.eval
        if not e.thresholds_m or any(t <= 0 for t in e.thresholds_m + e.height_thresholds_m):
            raise ConfigError("evaluation thresholds must be positive")
        if not e.ns or min(e.ns) < 1 or not e.k_heights or min(e.k_heights) < 1:
            raise ConfigError("ns and k_heights must be non-empty and >= 1")
        if e.ratio_threshold_m not in e.thresholds_m:
            raise ConfigError("ratio_threshold_m must be one of thresholds_m")
        s = self.synthetic
        if s.places < 1 or s.image_size % a.patch_size:
            raise ConfigError("synthetic image_size must be a multiple of patch_size and places >= 1")
        if s.separable and s.descriptor_dim < self.partition.build().num_levels:
            raise ConfigError("separable descriptors need descriptor_dim >= number of levels")
        return self

    def to_dict(self) -> dict[str, Any]:
        def strip(obj):
            if isinstance(obj, dict):
                return {k: strip(v) for k, v in obj.items() if v is not None}
            return obj

        return strip(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in doc.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "seed":
                kwargs[key] = _coerce(int, value, key)
                continue
            section_cls = sections[key].default_factory  # type: ignore[misc]
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{key}] must be a table")
            kwargs[key] = _build_section(section_cls, value, key)
        return cls(**kwargs).validate()

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls().validate()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_toml(text)


def _coerce(kind, value, name):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name} must be an integer")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} has invalid value {value!r}") from None


_FIELD_KINDS = {
    "float": float,
    "int": int,
    "str": str,
    "bool": bool,
    "str | None": str,
    "list[float]": (list, float),
    "list[int]": (list, int),
}


def _build_section(section_cls, values: Mapping[str, Any], section: str):
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        kind = _FIELD_KINDS[str(fields[key].type)]
        name = f"{section}.{key}"
        if isinstance(kind, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{name} must be a list")
            kwargs[key] = [_coerce(kind[1], v, name) for v in value]
        else:
            kwargs[key] = _coerce(kind, value, name)
    return section_cls(**kwargs)
