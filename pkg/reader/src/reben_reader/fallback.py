"""Independent minimal decoder for the stored value format.

Kept deliberately free of any pipeline imports: parity tests use it as
the second opinion on what the bytes say.  Not for production reads;
it validates only what it needs to interpret well-formed records.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPES = {
    "U8": np.dtype("uint8"),
    "U16": np.dtype("<u2"),
    "I16": np.dtype("<i2"),
    "I32": np.dtype("<i4"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}


def decode(blob: bytes) -> dict[str, np.ndarray]:
    """Parse one serialized record: header length, JSON header, payload."""
    (header_len,) = struct.unpack_from("<Q", blob)
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    payload = blob[8 + header_len :]
    out = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        begin, end = info["data_offsets"]
        array = np.frombuffer(payload[begin:end], dtype=_DTYPES[info["dtype"]])
        out[name] = array.reshape(info["shape"])
    return out
