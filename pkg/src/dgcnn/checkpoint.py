"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes   b"DGCNNCKP"
    version  uint32    currently 1
    count    uint32    number of entries
    entry * count:
        name_len  uint16, then name_len bytes of UTF-8
        dtype     uint8    0 = float64, 1 = float32, 2 = int64
        ndim      uint8, then ndim * uint64 extents
        payload   prod(extents) values, little-endian, C order

Entries are written in the module's declaration order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointMismatch, ParseError

MAGIC = b"DGCNNCKP"
VERSION = 1
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def write_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", path=str(path))
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=str(path))
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise ParseError(f"truncated payload for {name!r}", path=str(path))
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise ParseError(f"corrupt checkpoint: {exc}", path=str(path)) from None
    return out


def save_checkpoint(path, module) -> None:
    write_arrays(path, {name: t.data for name, t in module.named_tensors()})


def load_checkpoint(path, module) -> None:
    """Copy stored values into ``module``; names, shapes must match exactly."""
    arrays = read_arrays(path)
    state = dict(module.named_tensors())
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint keys differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in state.items():
        if arrays[name].shape != t.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
    for name, t in state.items():
        t.data = arrays[name].astype(t.dtype)
