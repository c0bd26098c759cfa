"""Binary parameter checkpoints.

Layout (little endian)::

    b"LQG1"  u32 block_count
    per block: u16 name_len, name (utf-8), u8 dtype (0=f32, 1=f64),
               u32 rank, u32 dims[rank], raw data
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from lqgan.errors import DataError

MAGIC = b"LQG1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(path: str | os.PathLike, blocks: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        raw = name.encode("utf-8")
        tag = _TAGS[arr.dtype]
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError("bad checkpoint magic", path=str(path))
    off = 4
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = _DTYPES.get(tag)
            if dt is None:
                raise DataError(f"unknown dtype tag {tag}", path=str(path), block=name)
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise DataError("truncated checkpoint", path=str(path), block=name)
            blocks[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).astype(
                dt.newbyteorder("="), copy=True
            )
            off += nbytes
    except struct.error as exc:
        raise DataError("truncated checkpoint", path=str(path)) from exc
    if off != len(buf):
        raise DataError("trailing bytes in checkpoint", path=str(path))
    return blocks
