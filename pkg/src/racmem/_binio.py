"""Little-endian helpers shared by the RACM / RACC / RACP / RACI formats."""
from __future__ import annotations

import struct

import numpy as np


class FormatError(Exception):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class Reader:
    """Cursor over an in-memory byte buffer that raises on short reads."""

    def __init__(self, buf: bytes, path: str = "<buffer>"):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: truncated (wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(n * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)

    def expect_header(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic)) if len(self.buf) >= len(magic) else self.buf
        if got != magic:
            raise BadMagicError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise VersionMismatchError(f"{self.path}: version {v}, expected {version}")

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def pack_u32(x: int) -> bytes:
    return struct.pack("<I", x)


def pack_u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def le_bytes(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def read_file(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
