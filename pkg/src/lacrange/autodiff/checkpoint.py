"""RFW1 weight container.

Layout: the 4-byte magic ``RFW1`` followed by records until end of file.
Each record is ``u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] |
f64 payload`` with every integer and float little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from lacrange.errors import FormatError

MAGIC = b"RFW1"


def save_weights(path, tensors: dict):
    buf = bytearray(MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    out = {}
    pos = 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(data):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record header") from exc
    return out
