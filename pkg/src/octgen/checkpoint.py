"""Binary checkpoint container: named float64 arrays plus a metadata dict.

Layout (all integers little-endian, all payloads little-endian float64):

    magic     8 bytes  b"OGCKPT01"
    version   u32      currently 1
    meta_len  u32      length of the UTF-8 JSON metadata blob
    meta      bytes    JSON object mapping string -> string
    count     u32      number of array records
    records   count times:
        name_len u32
        name     UTF-8 bytes
        ndim     u32
        dims     ndim x u64
        payload  prod(dims) x f64

Round-trips are bit-exact, including signed zeros and subnormals.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"OGCKPT01"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 12)
    off = 16
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
        off += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        arrays[name] = a.astype(np.float64, copy=True)
    return arrays, meta
