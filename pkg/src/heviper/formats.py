"""Little-endian binary helpers shared by the on-disk formats."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import MagicMismatchError, TruncatedFileError, VersionMismatchError

F32 = np.dtype("<f4")
U64 = np.dtype("<u8")


class BinaryReader:
    """Cursor over an in-memory byte buffer that refuses to read past the end."""

    def __init__(self, data: bytes, name: str = "<buffer>"):
        self.data = data
        self.name = name
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.name}: truncated at byte {self.pos} (wanted {n} more, "
                f"{len(self.data) - self.pos} available)"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        raw = self.take(int(count) * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()

    def expect_header(self, magic: bytes, version: int) -> None:
        found = self.take(4)
        if found != magic:
            raise MagicMismatchError(f"{self.name}: expected magic {magic!r}, found {found!r}")
        (found_version,) = self.unpack("I")
        if found_version != version:
            raise VersionMismatchError(
                f"{self.name}: unsupported version {found_version} (expected {version})"
            )

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def write_atomic(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` via a temporary file so readers never observe partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def f32_bytes(values) -> bytes:
    return np.ascontiguousarray(values, dtype=F32).tobytes()
