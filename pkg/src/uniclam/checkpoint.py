"""Named-tensor checkpoints ("UCLM" files), float32 little-endian payloads."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes

MAGIC = b"UCLM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CompatibilityError(CheckpointError):
    """A checkpoint tensor is missing or does not fit the configured model."""

    def __init__(self, name: str, message: str):
        self.tensor = name
        super().__init__(f"{name}: {message}")


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 255:
            raise CheckpointError(f"{name}: rank {a.ndim} exceeds 255")
        if not np.isfinite(a).all():
            raise CheckpointError(f"{name}: non-finite values")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated while reading {what} at byte offset {pos}")
        b = buf[pos : pos + n]
        pos += n
        return b

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic (expected UCLM)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not UTF-8 at byte offset {pos - n}") from e
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes at byte offset {pos}")
    return out


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buf)


def load_into(targets: dict[str, np.ndarray], tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``tensors[prefix + name]`` into each target array in place.

    Every target must be present with the same shape; extra tensors in the
    checkpoint under other prefixes are ignored.
    """
    for name, dst in targets.items():
        key = prefix + name
        if key not in tensors:
            raise CompatibilityError(key, "missing from checkpoint")
        src = tensors[key]
        if src.shape != dst.shape:
            raise CompatibilityError(key, f"checkpoint shape {src.shape} != model shape {dst.shape}")
        dst[...] = src
