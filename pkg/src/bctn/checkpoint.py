"""Binary checkpoints of named float32 parameter arrays.

Layout (all integers u32 little-endian)::

    b"BCTN1" | stage (1 byte) | config_len | config JSON (UTF-8)
    then, until end of file, one record per tensor:
    name_len | name | rank | dims... | raw float32 LE values
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BCTN1"


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class CheckpointMissing(FileNotFoundError):
    pass


@dataclass
class Checkpoint:
    stage: int
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = bytearray(MAGIC)
        out += struct.pack("<BI", self.stage, len(cfg))
        out += cfg
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            out += struct.pack("<I", len(raw)) + raw
            out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
            out += arr.tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:5] != MAGIC:
            raise BadMagic(f"expected magic {MAGIC!r}, found {bytes(buf[:5])!r}")
        pos = 5
        view = memoryview(buf)

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(buf):
                raise TruncatedFile(f"needed {n} bytes at offset {pos}, file has {len(buf)}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        stage, cfg_len = struct.unpack("<BI", take(5))
        config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while pos < len(buf):
            (name_len,) = struct.unpack("<I", take(4))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
            tensors[name] = arr.astype(np.float32)
        return cls(stage, config, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file next to ``path`` is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(str(path))
    return Checkpoint.from_bytes(path.read_bytes())


def checkpoint_from_store(store, stage: int, config: dict, names=None) -> Checkpoint:
    names = list(store) if names is None else list(names)
    return Checkpoint(stage, config, {n: store[n].data.astype(np.float32) for n in names})


def restore_into(store, ckpt: Checkpoint, names=None) -> None:
    """Copy checkpoint tensors into ``store``.

    ``names`` restricts which store entries must be filled; every one of them
    has to be present in the checkpoint with the same dims.
    """
    wanted = list(store) if names is None else list(names)
    missing = [n for n in wanted if n not in ckpt.tensors]
    if missing:
        raise KeyError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[:3]}")
    for n in wanted:
        arr = ckpt.tensors[n]
        if arr.shape != store[n].data.shape:
            raise DimMismatch(f"{n}: checkpoint {arr.shape} vs model {store[n].data.shape}")
        store[n].data[...] = arr
