"""Binary tensor archive for model state.

Layout, all integers little-endian u32: magic ``OCEN``, format version,
tensor count, then per tensor a name length, the UTF-8 name, the rank, one
extent per axis, and the raw little-endian float32 payload.  Entries keep
the model's registration order, so the same state always produces the same
bytes and a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IoError

MAGIC = b"OCEN"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise IoError(f"checkpoint {self.path} is truncated at byte {self.pos}")
        piece = self.buf[self.pos:self.pos + count]
        self.pos += count
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(buf, path)
    if reader.take(4) != MAGIC:
        raise IoError(f"{path} is not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise IoError(f"{path} has format version {version}, expected {VERSION}")
    count = reader.u32()
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * size)
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if reader.pos != len(buf):
        raise IoError(f"checkpoint {path} has {len(buf) - reader.pos} trailing bytes")
    return state
