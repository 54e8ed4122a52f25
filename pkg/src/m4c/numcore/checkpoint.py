"""Binary parameter checkpoints.

Layout (little-endian)::

    b"M4C1" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 dim | f64 data... )
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import ParseError

MAGIC = b"M4C1"
VERSION = 1


def save_checkpoint(path, params):
    """Write ``params`` (name -> Tensor or array) in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            arr = np.asarray(getattr(value, "data", value), dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: float64 array}`` dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = []
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * n
            entries.append((name, arr))
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated checkpoint") from exc
    for name, arr in entries:
        if name in out:
            raise ParseError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr
    if pos != len(blob):
        raise ParseError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
