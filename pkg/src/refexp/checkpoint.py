"""Dependency-free binary checkpoints, bit-exact across save/load cycles.

Layout (all little-endian):
    magic "UREF" | u32 version | u64 config_len | config JSON (UTF-8)
    | u64 step | u64 entry_count
    | per entry: u32 name_len | name UTF-8 | u32 rank | u64 dims[rank]
                 | raw 32-bit float data

Entries are sorted by name so a save -> load -> save round trip is byte
identical. Parameter arrays use the "param/" prefix, optimizer moments
"adam_m/" and "adam_v/".
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"UREF"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    step: int
    arrays: dict  # name -> float32 ndarray

    def params(self) -> dict:
        return {k[len("param/"):]: v for k, v in self.arrays.items()
                if k.startswith("param/")}


def save_checkpoint(path, config: dict, step: int, arrays: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(cfg))
    blob += cfg
    blob += struct.pack("<Q", step)
    blob += struct.pack("<Q", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated, expected {self.pos + n} bytes, "
                f"got {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"no such checkpoint: {path}")
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} != supported version {VERSION}")
    (cfg_len,) = r.unpack("<Q")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt config block: {e}") from None
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<Q")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take(n * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError(
            f"{path}: {len(r.data) - r.pos} trailing bytes after the last entry")
    return Checkpoint(config, step, arrays)
