"""Binary checkpoint container.

Layout (little-endian): b"TFRG", u32 version, u32 entry count, then per entry
u32 name length, UTF-8 name, u32 rank, rank x u32 extents, float32 logical values.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TFRG"
VERSION = 1


def encode(entries) -> bytes:
    """``entries``: iterable of (name, float32 array)."""
    entries = list(entries)
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode(data: bytes, source: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{source}: truncated at offset {pos} (need {n} bytes)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise FormatError(f"{source}: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        arr = np.frombuffer(take(4 * math.prod(shape)), dtype="<f4").reshape(shape)
        entries.append((name, arr.astype(np.float32)))
    if pos != len(data):
        raise FormatError(f"{source}: {len(data) - pos} trailing bytes after last entry")
    return entries


def save_checkpoint(module, path) -> Path:
    path = Path(path)
    path.write_bytes(encode((n, t.numpy()) for n, t in module.named_state()))
    return path


def load_checkpoint(path, module) -> None:
    """Restore every parameter and running statistic by name; any mismatch is an error."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: checkpoint not found")
    entries = decode(path.read_bytes(), str(path))
    have = dict(module.named_state())
    seen = set()
    for name, arr in entries:
        if name in seen:
            raise FormatError(f"{path}: duplicate entry '{name}'")
        seen.add(name)
        if name not in have:
            raise FormatError(f"{path}: unexpected entry '{name}' not present in the module")
        t = have[name]
        if tuple(arr.shape) != t.shape:
            raise FormatError(f"{path}: extent mismatch for entry '{name}': checkpoint "
                              f"{list(arr.shape)} vs module {list(t.shape)}")
    missing = [n for n in have if n not in seen]
    if missing:
        raise FormatError(f"{path}: missing entry '{missing[0]}'")
    for name, arr in entries:
        t = have[name]
        t.engine.assign(t, arr)
