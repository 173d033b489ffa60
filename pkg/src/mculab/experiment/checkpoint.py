"""Binary checkpoint container for parameter vectors.

Layout (all integers little-endian)::

    b"MCU1"                 magic
    u8                      format version (1)
    u64                     parameter count
    u32                     number of layout entries
    per entry:
        u16 + bytes         name length and UTF-8 name
        u8 + u64 * ndim     rank and shape
    f32 * count             payload
    u64                     FNV-1a 64 hash of the payload bytes
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from ..errors import BadMagicError, CheckpointError, HashMismatchError, TruncatedCheckpointError
from ..nn.model import LayoutEntry, ParamVector
from ..rng import fnv1a64

MAGIC = b"MCU1"
VERSION = 1


def encode(params: ParamVector) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BQI", VERSION, len(params), len(params.layout)))
    for entry in params.layout:
        name = entry.name.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack(f"<B{len(entry.shape)}Q", len(entry.shape), *entry.shape))
    payload = params.values.astype("<f4").tobytes()
    out.write(payload)
    out.write(struct.pack("<Q", fnv1a64(payload)))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.path}: checkpoint truncated at byte {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, path="<bytes>") -> ParamVector:
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {magic!r}")
    version, count, n_entries = r.unpack("<BQI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    layout, offset = [], 0
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        entry = LayoutEntry(name, tuple(int(s) for s in shape), offset)
        layout.append(entry)
        offset += entry.size
    if offset != count:
        raise CheckpointError(f"{path}: layout covers {offset} values, header declares {count}")
    payload = r.take(4 * count)
    (stored,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after the checksum")
    if fnv1a64(payload) != stored:
        raise HashMismatchError(f"{path}: payload hash mismatch (stored {stored:016x})")
    return ParamVector(np.frombuffer(payload, dtype="<f4"), layout)


def checkpoint_id(params: ParamVector) -> str:
    """Content id: FNV-1a 64 of the whole encoded checkpoint, as hex."""
    return f"{fnv1a64(encode(params)):016x}"


def save_checkpoint(params: ParamVector, path) -> str:
    """Write ``params`` atomically and return its content id."""
    data = encode(params)
    path = os.fspath(path)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return f"{fnv1a64(data):016x}"


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as fh:
        return decode(fh.read(), os.fspath(path))


def read_declared_count(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(13)
    if len(head) < 13:
        raise TruncatedCheckpointError(f"{path}: checkpoint header truncated")
    if head[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {head[:4]!r}")
    return struct.unpack("<Q", head[5:13])[0]
