"""PFTENSOR binary tensor files.

Layout, all little-endian::

    b"PFTENSOR"              8-byte magic
    u32 rank
    u32 extent * rank
    u32 element width        4 (float32) or 8 (float64)
    payload                  row-major IEEE-754 values
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from uniprompt.errors import IntegrityError

MAGIC = b"PFTENSOR"
_WIDTH_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_tensor(array):
    array = np.asarray(array)
    if array.dtype.kind != "f" or array.dtype.itemsize not in _WIDTH_TO_DTYPE:
        array = array.astype(np.float64)
    width = array.dtype.itemsize
    header = MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape) + struct.pack("<I", width)
    return header + np.ascontiguousarray(array, dtype=_WIDTH_TO_DTYPE[width]).tobytes()


def decode_tensor(buf, source="<bytes>"):
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise IntegrityError(f"{source}: not a PFTENSOR file (bad magic or truncated header)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    header_len = 12 + 4 * rank + 4
    if len(buf) < header_len:
        raise IntegrityError(f"{source}: truncated header (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    (width,) = struct.unpack_from("<I", buf, 12 + 4 * rank)
    if width not in _WIDTH_TO_DTYPE:
        raise IntegrityError(f"{source}: unsupported element width {width}")
    expected = int(np.prod(shape, dtype=np.int64)) * width
    payload = buf[header_len:]
    if len(payload) != expected:
        raise IntegrityError(f"{source}: payload has {len(payload)} bytes, header implies {expected}")
    dtype = _WIDTH_TO_DTYPE[width]
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, array):
    data = encode_tensor(array)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write tensor file {os.fspath(path)}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_tensor(buf, source=os.fspath(path))


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
