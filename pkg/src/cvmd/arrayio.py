"""Flat little-endian array serialization used by dataset and checkpoint files.

Layout per array, all fields little-endian:

    uint32  ndim
    uint32  dim[0] ... dim[ndim-1]
    float64 payload, C order

Multiple arrays are simply concatenated; readers must know the count (it is
recorded in the accompanying JSON manifest).
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import SchemaError

_U32 = struct.Struct("<I")


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(_U32.pack(a.ndim))
    for d in a.shape:
        fh.write(_U32.pack(d))
    fh.write(a.astype("<f8").tobytes())


def read_array(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise SchemaError("truncated array header")
    (ndim,) = _U32.unpack(head)
    shape = []
    for _ in range(ndim):
        raw = fh.read(4)
        if len(raw) != 4:
            raise SchemaError("truncated array shape")
        shape.append(_U32.unpack(raw)[0])
    n = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise SchemaError("truncated array payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_arrays(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            write_array(fh, a)


def load_arrays(path, count: int) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        return [read_array(fh) for _ in range(count)]
