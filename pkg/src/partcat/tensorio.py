"""Binary tensor container (PTNSR1) for embeddings and checkpoints.

Layout, all little-endian:
  magic "PTNSR1" | record count u32 | per record:
  name length u16, UTF-8 name | dtype code u8 (0=f32, 1=f64, 2=u8) |
  rank u8 | dims u32 each | payload, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTNSR1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class ContainerError(IOError):
    pass


def write_tensor_container(path: str | Path, records: dict[str, np.ndarray]) -> None:
    """Write named arrays; iteration order of `records` is preserved."""
    names = list(records)
    if len(set(names)) != len(names):
        raise ContainerError("duplicate record names")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(records[name])
        if arr.dtype not in _CODE_FOR:
            raise ContainerError(f"unsupported dtype {arr.dtype} for record {name!r}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ContainerError(f"record name too long: {name[:32]!r}...")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensor_container(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad magic in {path}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ContainerError(f"truncated container {path}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        if name in records:
            raise ContainerError(f"duplicate record name {name!r} in {path}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise ContainerError(f"unknown dtype code {code} in {path}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPE_CODES[code]
        payload = take(dtype.itemsize * int(np.prod(dims, dtype=np.int64)))
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if off != len(raw):
        raise ContainerError(f"trailing bytes in {path}")
    return records
