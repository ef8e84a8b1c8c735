"""Binary checkpoint format.

Layout (little-endian): magic ``COPD``, u32 version, u64 d, L, |U|, |I^A|,
|I^B|, then for each tensor: u32 name length, name bytes (UTF-8), u32 ndim,
u64 per dimension, row-major float64 values.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .model import CoPDParams, param_shapes
from .numcore import parameter

MAGIC = b"COPD"
VERSION = 1
_HEADER = struct.Struct("<4sI5Q")


class CheckpointFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionMismatchError(ValueError):
    pass


def save_checkpoint(params, path, L):
    chunks = [_HEADER.pack(MAGIC, VERSION, params.d, L, params.n_users,
                           params.n_items_a, params.n_items_b)]
    for name, t in params.named().items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.values.ndim))
        chunks.append(struct.pack(f"<{t.values.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def read_checkpoint(path):
    """Return ``(meta, tensors)`` where ``meta`` holds d, L and table sizes."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic, version, d, L, n_users, n_a, n_b = r.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    meta = {"d": d, "L": L, "n_users": n_users, "n_items_a": n_a, "n_items_b": n_b}
    tensors = {}
    while r.pos < len(data):
        start = r.pos
        (n,) = r.unpack("<I", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("tensor name is not UTF-8", start) from None
        (ndim,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        count = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * count, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return meta, tensors


def load_checkpoint(path, d=None):
    """Load :class:`CoPDParams`; ``d`` optionally asserts the embedding size."""
    meta, tensors = read_checkpoint(path)
    if d is not None and meta["d"] != d:
        raise DimensionMismatchError(f"checkpoint has d={meta['d']}, expected d={d}")
    expected = param_shapes(meta["n_users"], meta["n_items_a"], meta["n_items_b"], meta["d"])
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointFormatError(f"missing tensors {missing}", os.path.getsize(path))
    for k, shape in expected.items():
        if tensors[k].shape != tuple(shape):
            raise DimensionMismatchError(f"{k}: shape {tensors[k].shape}, expected {shape}")
    return CoPDParams(**{k: parameter(tensors[k]) for k in expected})


def checkpoint_meta(path):
    return read_checkpoint(path)[0]
