"""Binary tensor file format ("DSCT").

Layout, all little-endian:

    magic   4 bytes  b"DSCT"
    version 1 byte   (currently 1)
    dtype   1 byte   0 = float32, 1 = float64
    rank    1 byte
    extents rank * u64
    payload product(extents) scalars, row-major

Round trips are bitwise exact for both dtypes.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .errors import BadDtype, BadMagic, TensorFileError, TruncatedPayload
from .tensor import Tensor

MAGIC = b"DSCT"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_MAX_RANK = 16
_MAX_ELEMENTS = 1 << 40


def tensor_to_bytes(t: Tensor) -> bytes:
    code = _KIND_TO_CODE.get(t.data.dtype)
    if code is None:
        raise BadDtype(f"unsupported dtype {t.data.dtype}")
    arr = np.asarray(t.data, order="C")  # ascontiguousarray would promote rank-0 to rank-1
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    extents = b"".join(struct.pack("<Q", e) for e in arr.shape)
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes()
    return head + extents + payload


def tensor_from_stream(f) -> Tensor:
    """Read one tensor record from a binary stream, consuming exactly its bytes."""
    head = f.read(7)
    if len(head) < 7:
        raise TruncatedPayload("stream ends inside the tensor header")
    if head[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {head[:4]!r}")
    version, code, rank = head[4], head[5], head[6]
    if version != VERSION:
        raise BadMagic(f"unsupported format version {version}")
    if code not in _CODE_TO_DTYPE:
        raise BadDtype(f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise TensorFileError(f"rank {rank} exceeds limit {_MAX_RANK}")
    raw = f.read(8 * rank)
    if len(raw) < 8 * rank:
        raise TruncatedPayload("stream ends inside the extents block")
    extents = [struct.unpack_from("<Q", raw, 8 * i)[0] for i in range(rank)]
    if any(e < 1 for e in extents):
        raise TensorFileError(f"non-positive extent in {extents}")
    count = 1
    for e in extents:
        count *= e
    if count > _MAX_ELEMENTS:
        raise TensorFileError(f"element count {count} exceeds limit")
    dtype = _CODE_TO_DTYPE[code]
    payload = f.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayload(
            f"payload holds {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(extents).copy()
    return Tensor(arr)


def tensor_from_bytes(blob: bytes) -> Tensor:
    return tensor_from_stream(io.BytesIO(blob))


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        t = tensor_from_stream(f)
        if f.read(1):
            raise TensorFileError(f"{path}: trailing bytes after payload")
    return t
