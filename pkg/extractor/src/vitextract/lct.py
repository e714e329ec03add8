"""LCT1 tensor files: the wire format shared with the clustering engine.

Layout: magic "LCT1", dtype byte (1=f32, 2=u8, 3=i32), ndim byte (1..4),
ndim little-endian u32 dims, row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LCT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<u1"), 3: np.dtype("<i4")}
_CODE_OF_DTYPE = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int32"): 3}


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values)
    if arr.dtype not in _CODE_OF_DTYPE:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4 or any(d < 1 for d in arr.shape):
        raise ValueError(f"bad shape {arr.shape}")
    header = MAGIC + struct.pack("<BB", _CODE_OF_DTYPE[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an LCT1 tensor")
    code, ndim = raw[4], raw[5]
    shape = struct.unpack(f"<{ndim}I", raw[6:6 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    payload = raw[6 + 4 * ndim:]
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(
        dtype.newbyteorder("="), copy=True
    )
