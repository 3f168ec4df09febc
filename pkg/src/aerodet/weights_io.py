"""Little-endian binary container for named float64 tensors.

Layout: magic b'AERW', u32 version, u32 tensor count, then per tensor:
u32 name length, UTF-8 name, u32 rank, u64 dims, float64 payload in
C order.  Everything little-endian.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

from .errors import ContractError

MAGIC = b"AERW"
VERSION = 1


def save_weights(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ContractError(f"{path}: not a weights container")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported container version {version}")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = f.read(8 * n)
            if len(payload) != 8 * n:
                raise ContractError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out
