"""Binary weight archive (``CWT1``), little-endian.

Layout::

    magic   4 bytes  b"CWT1"
    count   u32
    per tensor:
        name_len u16, name (UTF-8), rank u8, extents rank x u32,
        dtype u8 (0 = float32), values row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArchiveFormatError, DuplicateTensorError

MAGIC = b"CWT1"
DTYPE_CODES = {0: np.dtype("<f4")}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveFormatError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if not 1 <= arr.ndim <= 255:
            raise ArchiveFormatError(f"tensor {name!r} has unsupported rank {arr.ndim}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", 0))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveFormatError(f"archive truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ArchiveFormatError("not a CWT1 weight archive (bad magic)")
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveFormatError(f"tensor name is not UTF-8: {e}") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        if code not in DTYPE_CODES:
            raise ArchiveFormatError(f"tensor {name!r}: unknown dtype code {code}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        if name in out:
            raise DuplicateTensorError(f"tensor name {name!r} appears twice")
        out[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise ArchiveFormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def write_archive(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
