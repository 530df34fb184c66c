"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes   b"JSCCCKPT"
    version   uint32    currently 1
    count     uint32    number of tensors
    then, per tensor, in store order:
      name_len  uint32
      name      name_len bytes, UTF-8
      ndim      uint32
      dims      ndim x uint64
      values    prod(dims) x float64 (little-endian, C order)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"JSCCCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], params: Union[ParameterStore, Dict[str, np.ndarray]]) -> None:
    items = [(k, np.asarray(v) if isinstance(v, np.ndarray) else v.data) for k, v in params.items()]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes at offset {pos}")
    return out
