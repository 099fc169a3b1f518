"""Reader/writer for the ``TNSR v1`` tensor file format.

A file is one ASCII header line::

    TNSR v1 <dtype> <ndims> <d0> <d1> ...

followed by the little-endian scalars in row-major order. ``dtype`` is one
of ``f64``, ``f32`` or ``i64``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from damamba.errors import DataError

_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8"}
_NAMES = {np.dtype("float64"): "f64", np.dtype("float32"): "f32", np.dtype("int64"): "i64"}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _NAMES:
        arr = arr.astype(np.float64)
    name = _NAMES[arr.dtype]
    header = " ".join(["TNSR", "v1", name, str(arr.ndim), *map(str, arr.shape)]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()


def loads(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    nl = buf.find(b"\n")
    if nl < 0:
        raise DataError(f"{source}: missing TNSR header line")
    parts = buf[:nl].decode("ascii", errors="replace").split()
    if len(parts) < 4 or parts[0] != "TNSR" or parts[1] != "v1":
        raise DataError(f"{source}: not a TNSR v1 file")
    if parts[2] not in _DTYPES:
        raise DataError(f"{source}: unknown dtype {parts[2]!r}")
    try:
        ndims = int(parts[3])
        shape = tuple(int(p) for p in parts[4:])
    except ValueError as exc:
        raise DataError(f"{source}: malformed header") from exc
    if len(shape) != ndims or any(s < 0 for s in shape):
        raise DataError(f"{source}: header declares {ndims} dims but lists {shape}")
    dt = np.dtype(_DTYPES[parts[2]])
    body = buf[nl + 1 :]
    count = int(np.prod(shape)) if shape else 1
    if len(body) != count * dt.itemsize:
        raise DataError(f"{source}: expected {count * dt.itemsize} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing tensor file: {p}")
    return loads(p.read_bytes(), str(p))
