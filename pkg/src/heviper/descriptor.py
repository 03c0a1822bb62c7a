"""Backbone stand-in, pooling and descriptor extraction.

The real system runs a frozen ViT; here :class:`BackboneStub` produces the
per-block token sequences from an image with fixed seeded linear maps, so the
adapter branches and retrieval stack can be exercised end to end. Externally
computed descriptors can bypass the stub entirely through the descriptor file
format (:func:`save_descriptors` / :func:`load_descriptors`).
"""

from __future__ import annotations

import functools
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import AdapterParams, run_branch
from .errors import ConfigError, InputError
from .formats import F32, U64, BinaryReader, f32_bytes, write_atomic

GEM_EPS = 1e-6
DEFAULT_GEM_P = 3.0

DESCRIPTORS_MAGIC = b"HEVD"
DESCRIPTORS_VERSION = 1


@functools.lru_cache(maxsize=32)
def _stub_tables(seed: int, num_blocks: int, dim: int, in_features: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5708, in_features]))
    embed = (rng.standard_normal((dim, in_features)) / np.sqrt(in_features)).astype(np.float32)
    bias = (0.1 * rng.standard_normal(dim)).astype(np.float32)
    blocks = []
    for _ in range(num_blocks - 1):
        mix = np.eye(dim) + 0.1 * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        blocks.append(mix.astype(np.float32))
    for arr in (embed, bias, *blocks):
        arr.setflags(write=False)
    return embed, bias, tuple(blocks)


@dataclass(frozen=True)
class BackboneStub:
    """Deterministic replacement for the frozen foundation model.

    An image is cut into ``patch_size`` square patches; each patch is mean-pooled
    onto a ``cells x cells`` sub-grid per channel and linearly embedded to ``dim``.
    The class token is the mean of the patch tokens. Block ``l`` applies a fixed
    near-identity linear map to the previous block's tokens. :meth:`forward`
    returns the inputs of the ``num_blocks`` blocks, ``[x_0, ..., x_{L-1}]``.
    """

    seed: int = 0
    num_blocks: int = 4
    dim: int = 128
    patch_size: int = 14
    cells: int = 2

    def __post_init__(self):
        if self.num_blocks < 1 or self.dim < 1:
            raise ConfigError("stub needs at least one block and a positive dim")
        if self.patch_size < 1 or self.cells < 1 or self.patch_size % self.cells:
            raise ConfigError(f"patch size {self.patch_size} is not divisible into {self.cells} cells")

    def patch_features(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.dtype == np.uint8:
            pixels = image.astype(np.float32) / np.float32(255.0)
        else:
            pixels = image.astype(np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise InputError(f"image must be HxW or HxWxC, got shape {image.shape}")
        if not np.all(np.isfinite(pixels)):
            raise InputError("image contains non-finite values")
        height, width, channels = pixels.shape
        p, c = self.patch_size, self.cells
        if height % p or width % p:
            raise InputError(f"image {height}x{width} is not divisible by patch size {p}")
        gh, gw = height // p, width // p
        if gh != gw:
            raise InputError(f"image gives a {gh}x{gw} patch grid; a square grid is required")
        cell = p // c
        pooled = pixels.reshape(gh, c, cell, gw, c, cell, channels).mean(axis=(2, 5), dtype=np.float64)
        pooled = pooled.transpose(0, 2, 1, 3, 4).reshape(gh * gw, c * c * channels)
        return pooled.astype(np.float32)

    def forward(self, image: np.ndarray) -> list[np.ndarray]:
        feats = self.patch_features(image)
        embed, bias, blocks = _stub_tables(self.seed, self.num_blocks, self.dim, feats.shape[1])
        patches = feats @ embed.T + bias
        x = np.concatenate([patches.mean(axis=0, keepdims=True), patches], axis=0).astype(np.float32)
        stream = [x]
        for mix in blocks:
            x = (x @ mix.T).astype(np.float32)
            stream.append(x)
        return stream


def backbone_stub_forward(image: np.ndarray, stub: BackboneStub) -> list[np.ndarray]:
    return stub.forward(image)


def gem_pool(tokens: np.ndarray, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS) -> np.ndarray:
    """Generalized-mean pooling over patch tokens (the class token is excluded)."""
    if not p >= 1:
        raise ConfigError(f"GeM power must be >= 1, got {p}")
    patches = np.asarray(tokens, dtype=np.float64)[1:]
    if patches.shape[0] == 0:
        raise InputError("no patch tokens to pool")
    x = np.maximum(patches, eps)
    # factor out the max so large powers neither overflow nor underflow
    top = x.max(axis=0)
    return (top * np.mean((x / top) ** p, axis=0) ** (1.0 / p)).astype(np.float32)


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    return np.asarray(tokens, dtype=np.float64)[1:].mean(axis=0).astype(np.float32)


def l2_normalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    norm = np.sqrt(np.sum(values.astype(np.float64) ** 2, axis=-1, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise InputError("cannot normalize a zero or non-finite descriptor")
    return (values / norm).astype(np.float32)


@dataclass(frozen=True)
class Aggregator:
    """Place-descriptor aggregation: ``gem`` with power ``p`` or plain ``mean``."""

    kind: str = "gem"
    p: float = DEFAULT_GEM_P

    def __post_init__(self):
        if self.kind not in ("gem", "mean"):
            raise ConfigError(f"unknown aggregator {self.kind!r} (expected 'gem' or 'mean')")
        if self.kind == "gem" and not self.p >= 1:
            raise ConfigError(f"GeM power must be >= 1, got {self.p}")

    @classmethod
    def parse(cls, value: "str | Aggregator", default_p: float = DEFAULT_GEM_P) -> "Aggregator":
        """Accepts ``"mean"``, ``"gem"`` or ``"gem:<p>"``."""
        if isinstance(value, Aggregator):
            return value
        kind, _, power = str(value).partition(":")
        if power:
            try:
                return cls(kind, float(power))
            except ValueError:
                raise ConfigError(f"bad aggregator {value!r}") from None
        return cls(kind, default_p)

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        if self.kind == "mean":
            return mean_pool(tokens)
        return gem_pool(tokens, self.p)

    def __str__(self):
        return "mean" if self.kind == "mean" else f"gem:{self.p:g}"


def extract_height_descriptor(
    image,
    stub: BackboneStub,
    he_params: Sequence[AdapterParams],
    p: float = DEFAULT_GEM_P,
    *,
    stream: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    if stream is None:
        stream = stub.forward(image)
    return l2_normalize(gem_pool(run_branch(stream, he_params), p))


def extract_place_descriptor(
    image,
    stub: BackboneStub,
    vpr_params: Sequence[AdapterParams],
    aggregator: "str | Aggregator" = "gem",
    *,
    stream: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    aggregator = Aggregator.parse(aggregator)
    if stream is None:
        stream = stub.forward(image)
    return l2_normalize(aggregator(run_branch(stream, vpr_params)))


def extract_descriptors(
    image,
    stub: BackboneStub,
    he_params: Sequence[AdapterParams],
    vpr_params: Sequence[AdapterParams],
    aggregator: "str | Aggregator" = "gem",
    height_p: float = DEFAULT_GEM_P,
) -> tuple[np.ndarray, np.ndarray]:
    """Height and place descriptors from a single backbone pass."""
    stream = stub.forward(image)
    height = extract_height_descriptor(image, stub, he_params, height_p, stream=stream)
    place = extract_place_descriptor(image, stub, vpr_params, aggregator, stream=stream)
    return height, place


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Rows of descriptors keyed by 64-bit record ids."""

    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
            raise InputError(f"{ids.shape[0]} ids do not match descriptor matrix {vectors.shape}")
        if len(np.unique(ids)) != len(ids):
            raise InputError("descriptor ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @functools.cached_property
    def _index(self) -> dict[int, int]:
        return {int(i): row for row, i in enumerate(self.ids)}

    def get(self, record_id: int) -> np.ndarray:
        try:
            return self.vectors[self._index[int(record_id)]]
        except KeyError:
            raise InputError(f"no descriptor for record id {record_id}") from None

    def __eq__(self, other):
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and (
            self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def encode_descriptors(descriptors: DescriptorSet) -> bytes:
    return b"".join(
        [
            DESCRIPTORS_MAGIC,
            struct.pack("<IQI", DESCRIPTORS_VERSION, len(descriptors), descriptors.dim),
            f32_bytes(descriptors.vectors),
            np.ascontiguousarray(descriptors.ids, dtype=U64).tobytes(),
        ]
    )


def decode_descriptors(data: bytes, name: str = "<buffer>") -> DescriptorSet:
    reader = BinaryReader(data, name)
    reader.expect_header(DESCRIPTORS_MAGIC, DESCRIPTORS_VERSION)
    count, dim = reader.unpack("QI")
    vectors = reader.array(F32, count * dim).reshape(count, dim)
    ids = reader.array(U64, count)
    if reader.remaining:
        raise InputError(f"{name}: {reader.remaining} trailing bytes")
    return DescriptorSet(ids, vectors)


def save_descriptors(path: str | os.PathLike, descriptors: DescriptorSet) -> None:
    write_atomic(path, encode_descriptors(descriptors))


def load_descriptors(path: str | os.PathLike) -> DescriptorSet:
    with open(path, "rb") as fh:
        return decode_descriptors(fh.read(), str(path))
