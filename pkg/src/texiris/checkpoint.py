"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"IRNF"  u32 version  u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, u64 extent * rank,
                float32 data (row-major)
    u32 metadata_len, metadata (UTF-8 JSON)
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, VersionError

MAGIC = b"IRNF"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def encode(tensors, metadata=None):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf):
    """Parse a checkpoint completely before returning anything."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}", 4)
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", r.pos) from None
        (rank,) = r.unpack("<I", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = r.take(4 * n, f"data of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(meta_len, "metadata")
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checksum", r.pos)
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch", body_end)
    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata block is not valid JSON", body_end - meta_len) from None
    return Checkpoint(tensors, metadata, version)


def save_checkpoint(state, path, metadata=None):
    """Write ``state`` (a module or a name -> array mapping) atomically."""
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    data = encode(state, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    return decode(Path(path).read_bytes())
