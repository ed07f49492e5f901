"""Dense NCHW tensors and the RTEN v1 binary codec.

A tensor is a C-ordered 4-D numpy array of shape (n, c, h, w); element
(i, j, y, x) sits at flat index ((i*c + j)*h + y)*w + x.
"""
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from ..errors import ArchiveError, DimensionError
from ..models import Precision

Tensor = np.ndarray

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1
# dtype codes: 0 = f32 (standard), 1 = f64 (high precision)
RTEN_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_RTEN_HEADER = struct.Struct("<4sBBI4Q")


def as_tensor(data, precision: Precision = Precision.STANDARD) -> Tensor:
    """Copy data into a contiguous 4-D tensor of the requested precision."""
    arr = np.ascontiguousarray(data, dtype=precision.dtype)
    check_tensor(arr)
    return arr


def check_tensor(x: Tensor, name: str = "input") -> Tuple[int, int, int, int]:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"{name} has an empty axis: shape {x.shape}")
    return x.shape


def zeros(shape, precision: Precision = Precision.STANDARD) -> Tensor:
    arr = np.zeros(shape, dtype=precision.dtype)
    check_tensor(arr)
    return arr


def flat_index(shape, i: int, j: int, y: int, x: int) -> int:
    _, c, h, w = shape
    return ((i * c + j) * h + y) * w + x


def precision_of(x: Tensor) -> Precision:
    return Precision.HIGH if x.dtype == np.float64 else Precision.STANDARD


def encode_rten(x: Tensor) -> bytes:
    """Serialise a 4-D tensor as an RTEN v1 blob."""
    check_tensor(x)
    if x.dtype == np.float64:
        code = 1
    else:
        code = 0
    payload = np.ascontiguousarray(x, dtype=RTEN_DTYPES[code]).tobytes()
    return _RTEN_HEADER.pack(RTEN_MAGIC, RTEN_VERSION, code, 4, *x.shape) + payload


def decode_rten(buf: Union[bytes, memoryview], offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one RTEN blob starting at offset; returns (tensor, next offset)."""
    if len(buf) - offset < _RTEN_HEADER.size:
        raise ArchiveError("truncated RTEN header", offset)
    magic, version, code, rank, *dims = _RTEN_HEADER.unpack_from(buf, offset)
    if magic != RTEN_MAGIC:
        raise ArchiveError(f"bad RTEN magic {magic!r}", offset)
    if version != RTEN_VERSION:
        raise ArchiveError(f"unsupported RTEN version {version}", offset)
    if code not in RTEN_DTYPES:
        raise ArchiveError(f"unknown RTEN dtype code {code}", offset)
    if rank != 4:
        raise ArchiveError(f"RTEN rank must be 4, got {rank}", offset)
    dtype = RTEN_DTYPES[code]
    start = offset + _RTEN_HEADER.size
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - start < nbytes:
        raise ArchiveError(f"truncated RTEN payload: need {nbytes} bytes, have {len(buf) - start}", start)
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=start)
    tensor = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return tensor, start + nbytes


def write_rten(x: Tensor, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_rten(x))
    return path


def read_rten(path) -> Tensor:
    data = Path(path).read_bytes()
    tensor, end = decode_rten(data)
    if end != len(data):
        raise ArchiveError(f"{len(data) - end} trailing bytes after RTEN payload", end)
    return tensor
