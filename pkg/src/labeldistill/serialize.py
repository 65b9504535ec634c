"""Flat binary tensor records for checkpoints and diagnostic dumps.

Per tensor: name length (u64 LE), name bytes (utf-8), rank (u64 LE),
extents (u64 LE each), values (f64 LE, row-major). Records are simply
concatenated; tensors are written sorted by name so identical states
produce identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np


def save_tensors(path, arrays):
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    out = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0
    total = len(blob)
    while off < total:
        (nlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        out[name] = arr.astype(np.float64)
    return out
