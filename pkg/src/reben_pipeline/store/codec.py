"""Bit-exact tensor record serialization.

A record is an ordered map of named tensors.  The wire format is the
widely used safetensors layout: an 8-byte little-endian header length, a
JSON header mapping each name to dtype, shape and payload offsets, then
the raw little-endian buffers back to back.  Headers list names in
lexicographic order and are space-padded so the payload starts 8-byte
aligned, which makes encoding canonical: equal records produce equal
bytes.  Third-party safetensors readers can decode these values
directly.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Mapping, Union

import numpy as np

from ..errors import (
    MalformedHeaderError,
    OffsetOverlapError,
    OversizedHeaderError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
)

#: Cap on the declared header size when decoding untrusted bytes.
DEFAULT_MAX_HEADER_BYTES = 1 << 20

#: Supported dtype names and their numpy little-endian equivalents.
DTYPES: dict[str, np.dtype] = {
    "U8": np.dtype("uint8"),
    "U16": np.dtype("<u2"),
    "I16": np.dtype("<i2"),
    "I32": np.dtype("<i4"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}

_NUMPY_TO_NAME = {(dt.kind, dt.itemsize): name for name, dt in DTYPES.items()}

TensorMapping = Mapping[str, np.ndarray]
Buffer = Union[bytes, bytearray, memoryview]


def dtype_name(dtype: np.dtype) -> str:
    """Format name for a numpy dtype, rejecting anything unsupported."""
    dtype = np.dtype(dtype)
    if dtype.byteorder == ">":
        raise UnsupportedDtypeError(f"big-endian buffers are not supported: {dtype}")
    name = _NUMPY_TO_NAME.get((dtype.kind, dtype.itemsize))
    if name is None:
        raise UnsupportedDtypeError(f"dtype {dtype} is outside the supported set")
    return name


def encode_record(tensors: TensorMapping) -> bytes:
    """Serialize named tensors deterministically.

    Arrays are written C-contiguous and little-endian; names appear in
    lexicographic order with contiguous payload offsets in that order.
    """
    names = sorted(tensors)
    header: dict[str, dict] = {}
    parts: list[bytes] = []
    offset = 0
    for name in names:
        if not isinstance(name, str) or not name:
            raise MalformedHeaderError(f"tensor names must be non-empty strings: {name!r}")
        if name == "__metadata__":
            raise MalformedHeaderError("'__metadata__' is reserved and not a tensor name")
        array = np.asarray(tensors[name])
        type_name = dtype_name(array.dtype)
        shape = array.shape
        # ascontiguousarray promotes 0-d to 1-d, so keep the original shape
        array = np.ascontiguousarray(array, dtype=DTYPES[type_name])
        data = array.tobytes()
        header[name] = {
            "dtype": type_name,
            "shape": list(shape),
            "data_offsets": [offset, offset + len(data)],
        }
        offset += len(data)
        parts.append(data)
    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode()
    header_bytes += b" " * (-len(header_bytes) % 8)
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(parts)


def _parse_header(doc: object, payload_len: int) -> dict[str, tuple[np.dtype, tuple, int, int]]:
    if not isinstance(doc, dict):
        raise MalformedHeaderError("header is not a JSON object")
    entries: dict[str, tuple[np.dtype, tuple, int, int]] = {}
    for name, info in doc.items():
        if name == "__metadata__":
            if not isinstance(info, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in info.items()
            ):
                raise MalformedHeaderError("__metadata__ must map strings to strings")
            continue
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(f"bad header entry for {name!r}")
        if info["dtype"] not in DTYPES:
            raise UnsupportedDtypeError(f"tensor {name!r} has dtype {info['dtype']!r}")
        dtype = DTYPES[info["dtype"]]
        shape = info["shape"]
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
        ):
            raise MalformedHeaderError(f"bad shape for {name!r}: {shape!r}")
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise MalformedHeaderError(f"bad data_offsets for {name!r}: {offsets!r}")
        begin, end = offsets
        if begin < 0 or end < begin:
            raise OffsetOverlapError(f"inverted offsets for {name!r}: [{begin}, {end}]")
        expected = dtype.itemsize * math.prod(shape)
        if end - begin != expected:
            raise MalformedHeaderError(
                f"tensor {name!r} declares {end - begin} bytes, shape needs {expected}"
            )
        if end > payload_len:
            raise TruncatedPayloadError(
                f"tensor {name!r} ends at {end}, payload has {payload_len} bytes"
            )
        entries[name] = (dtype, tuple(shape), begin, end)
    cursor = 0
    for name, (_, _, begin, end) in sorted(entries.items(), key=lambda kv: kv[1][2:4]):
        if begin != cursor:
            raise OffsetOverlapError(
                f"tensor {name!r} begins at {begin}, expected {cursor};"
                " offsets must tile the payload"
            )
        cursor = end
    if cursor != payload_len:
        raise OffsetOverlapError(
            f"offsets cover {cursor} bytes but the payload has {payload_len}"
        )
    return entries


#: Parsed headers keyed by their exact bytes.  Records of one dataset share
#: identical headers, so random reads skip JSON parsing and revalidation.
_HEADER_CACHE: dict[bytes, tuple[tuple[tuple[str, np.dtype, tuple, int, int], ...], int]] = {}
_HEADER_CACHE_MAX = 4096


def decode_record(
    data: Buffer, *, max_header_bytes: int = DEFAULT_MAX_HEADER_BYTES
) -> dict[str, np.ndarray]:
    """Parse serialized bytes back into named arrays.

    All header invariants are validated before the payload is touched.
    Returned arrays are read-only views into ``data`` where the buffer
    allows it; names come back in lexicographic order.
    """
    view = memoryview(data)
    if len(view) < 8:
        raise MalformedHeaderError("buffer too short for the header length field")
    (header_len,) = struct.unpack_from("<Q", view)
    if header_len > max_header_bytes:
        raise OversizedHeaderError(
            f"declared header of {header_len} bytes exceeds cap {max_header_bytes}"
        )
    if 8 + header_len > len(view):
        raise TruncatedPayloadError(
            f"declared header of {header_len} bytes overruns the {len(view)}-byte buffer"
        )
    header_bytes = bytes(view[8 : 8 + header_len])
    payload = view[8 + header_len :]
    cached = _HEADER_CACHE.get(header_bytes)
    if cached is not None and cached[1] == len(payload):
        flat = cached[0]
    else:
        try:
            doc = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
        entries = _parse_header(doc, len(payload))
        flat = tuple(
            (name, *entries[name]) for name in sorted(entries)
        )
        if len(_HEADER_CACHE) >= _HEADER_CACHE_MAX:
            _HEADER_CACHE.clear()
        _HEADER_CACHE[header_bytes] = (flat, len(payload))
    out: dict[str, np.ndarray] = {}
    for name, dtype, shape, begin, end in flat:
        out[name] = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape)
    return out


def records_equal(a: TensorMapping, b: TensorMapping) -> bool:
    """Bit-exact comparison: same names, dtypes, shapes and buffer bytes."""
    if set(a) != set(b):
        return False
    for name in a:
        x, y = np.asarray(a[name]), np.asarray(b[name])
        if dtype_name(x.dtype) != dtype_name(y.dtype) or x.shape != y.shape:
            return False
        if np.ascontiguousarray(x).tobytes() != np.ascontiguousarray(y).tobytes():
            return False
    return True
