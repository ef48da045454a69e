"""Named-tensor archive.

Layout (little-endian)::

    b"MMPD" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 dim | float32 payload )
    u64 checksum   (blake2b-64 over every preceding byte)
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from multifuse.errors import ChecksumError, FormatError

MAGIC = b"MMPD"
VERSION = 1


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode(data: bytes, path=None) -> "OrderedDict[str, np.ndarray]":
    if len(data) < 20 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", path, 0)
    body, stored = data[:-8], data[-8:]
    if _digest(body) != stored:
        raise ChecksumError(f"checkpoint checksum mismatch{'' if path is None else f' in {path}'}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    pos = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            start = pos
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise FormatError(f"tensor {name!r} payload truncated", path, start)
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}", path, start)
            out[name] = arr
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}", path, pos) from None
    if pos != len(body):
        raise FormatError("trailing bytes after the last tensor", path, pos)
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes(), path)


def save_model(path, model, extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
    tensors = OrderedDict(model.state_dict())
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise ValueError(f"extra tensor {name!r} collides with a model parameter")
        tensors[name] = arr
    save_checkpoint(path, tensors)


def load_model(path, model) -> "OrderedDict[str, np.ndarray]":
    """Load model parameters; returns the tensors that are not model parameters."""
    tensors = load_checkpoint(path)
    names = {n for n, _ in model.named_parameters()}
    model.load_state_dict(OrderedDict((k, v) for k, v in tensors.items() if k in names), strict=True)
    return OrderedDict((k, v) for k, v in tensors.items() if k not in names)
