"""``EGTC`` named-tensor container used for checkpoints and attention dumps.

Layout (all integers u32 little-endian)::

    b"EGTC" | version=1 | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE payload
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"EGTC"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if len(buf) < 4:
        raise FormatError("missing magic", 0)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", start + 4) from exc
        rank = r.u32(f"rank of {name!r}")
        dims = tuple(r.u32(f"dims of {name!r}") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * n, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor", r.pos)
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
