"""Netpbm (PGM/PPM) rasters and raw float32 grids stored as ``.npy``."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import InputError
from .formats import write_atomic


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise InputError("truncated netpbm header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from binary pixel data
    return tokens, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise InputError(f"unsupported netpbm magic {magic!r}")
    tokens, offset = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise InputError(f"bad netpbm header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise InputError(f"only 8-bit netpbm rasters are supported (maxval={maxval})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        pixels = np.frombuffer(data, dtype=np.uint8, count=-1, offset=offset)
        if pixels.size < count:
            raise InputError("truncated netpbm pixel data")
        pixels = pixels[:count]
    else:
        values = data[offset - 1 :].split()
        if len(values) < count:
            raise InputError("truncated netpbm pixel data")
        pixels = np.array([int(v) for v in values[:count]], dtype=np.uint8)
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PGM/PPM raster as uint8 or an ``.npy`` float32 grid."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            grid = np.load(path, allow_pickle=False)
            if grid.dtype != np.float32:
                raise InputError(f"{path}: raw grids must be float32, got {grid.dtype}")
            return grid
        return decode_netpbm(path.read_bytes())
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


def encode_netpbm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise InputError("only uint8 rasters can be written")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise InputError(f"cannot encode image of shape {image.shape}")
    header = b"%s\n%d %d\n255\n" % (magic, image.shape[1], image.shape[0])
    return header + np.ascontiguousarray(image).tobytes()


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    write_atomic(path, encode_netpbm(image))
