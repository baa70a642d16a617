"""UMDT binary tensor files.

Layout (little-endian)::

    b"UMDT" | u32 version (=1) | u8 dtype code (1=f32, 2=f64) | u8 ndim
    | ndim x u32 shape | row-major payload
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"UMDT"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class UMDTError(ValueError):
    """Base class for malformed UMDT files."""


class BadMagicError(UMDTError):
    pass


class UnknownDTypeError(UMDTError):
    pass


class UnsupportedVersionError(UMDTError):
    pass


class TruncatedPayloadError(UMDTError):
    pass


def _as_array(t) -> np.ndarray:
    if hasattr(t, "detach"):  # torch.Tensor
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise UnknownDTypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim > 255:
        raise UMDTError("too many dimensions")
    if any(s <= 0 for s in arr.shape):
        raise UMDTError(f"shape entries must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UMDTError("tensor contains non-finite values")
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 10:
        raise TruncatedPayloadError("header truncated")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported UMDT version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnknownDTypeError(f"unknown dtype code {code}")
    off = 10
    if len(buf) < off + 4 * ndim:
        raise TruncatedPayloadError("shape truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dtype = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    # native-endian copy so callers get a writable array
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(t, path) -> None:
    data = encode_tensor(t)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())
