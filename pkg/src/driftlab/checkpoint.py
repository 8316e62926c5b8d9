"""Versioned binary checkpoints of named float64 tensors.

Layout (little-endian)::

    magic  b"DLCK"
    u32    format version
    str    module name                (u32 byte length + utf-8)
    u32    number of dimension entries
           per entry: str name, i64 value
    u32    number of tensors
           per tensor: str name, u32 rank, rank x u64 dims, f64 values
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def dumps(module: str, tensors: Mapping[str, np.ndarray], dims: Mapping[str, int] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_str(buf, module)
    dims = dict(dims or {})
    buf.write(struct.pack("<I", len(dims)))
    for name, value in dims.items():
        _write_str(buf, name)
        buf.write(struct.pack("<q", int(value)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes, module: str | None = None) -> tuple[str, dict[str, int], dict[str, np.ndarray]]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a driftlab checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    name = _read_str(buf)
    if module is not None and name != module:
        raise CheckpointError(f"checkpoint holds module {name!r}, expected {module!r}")
    (n_dims,) = struct.unpack("<I", buf.read(4))
    dims = {}
    for _ in range(n_dims):
        key = _read_str(buf)
        (dims[key],) = struct.unpack("<q", buf.read(8))
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(n_tensors):
        key = _read_str(buf)
        (rank,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[key] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return name, dims, tensors


def save(path, module: str, tensors: Mapping[str, np.ndarray], dims: Mapping[str, int] | None = None) -> None:
    Path(path).write_bytes(dumps(module, tensors, dims))


def load(path, module: str | None = None):
    return loads(Path(path).read_bytes(), module)
