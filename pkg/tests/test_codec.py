import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from safetensors.numpy import load as safetensors_load
from safetensors.numpy import save as safetensors_save

from reben_pipeline.errors import (
    MalformedHeaderError,
    OffsetOverlapError,
    OversizedHeaderError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
)
from reben_pipeline.store.codec import (
    DTYPES,
    decode_record,
    encode_record,
    records_equal,
)


def random_record(rng: np.random.Generator) -> dict[str, np.ndarray]:
    names = rng.permutation(
        ["B02", "B03", "B8A", "VV", "VH", "reference_map", "alpha", "z9"]
    )[: rng.integers(1, 5)]
    record = {}
    for name in names:
        dtype = DTYPES[list(DTYPES)[rng.integers(0, len(DTYPES))]]
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(rng.integers(0, 7)) for _ in range(ndim))
        if dtype.kind == "f":
            values = rng.normal(size=shape)
            flat = values.reshape(-1)
            if flat.size and rng.random() < 0.3:
                flat[rng.integers(0, flat.size)] = np.nan
            record[name] = values.astype(dtype)
        else:
            info = np.iinfo(dtype)
            record[name] = rng.integers(
                info.min, int(info.max) + 1, size=shape
            ).astype(dtype)
    return record


def header_of(blob: bytes) -> dict:
    (n,) = struct.unpack_from("<Q", blob)
    return json.loads(blob[8 : 8 + n].decode())


class TestEncode:
    def test_single_tensor_reference_bytes(self):
        # fixed byte layout: u64 header length, padded JSON header, raw payload
        record = {"B02": np.array([[1, 2], [3, 4]], dtype="<u2")}
        blob = encode_record(record)
        (n,) = struct.unpack_from("<Q", blob)
        header = blob[8 : 8 + n]
        assert header.rstrip(b" ") == (
            b'{"B02":{"dtype":"U16","shape":[2,2],"data_offsets":[0,8]}}'
        )
        assert (8 + n) % 8 == 0
        assert blob[8 + n :] == bytes.fromhex("0100020003000400")

    def test_matches_published_implementation_bytes(self):
        record = {"B02": np.array([[1, 2], [3, 4]], dtype="<u2")}
        assert encode_record(record) == safetensors_save(record)

    def test_published_decoder_reads_multi_tensor_output(self):
        rng = np.random.default_rng(1)
        record = {
            "B02": rng.integers(0, 65535, (4, 4)).astype("<u2"),
            "VV": rng.normal(size=(4, 4)).astype("<f4"),
            "reference_map": rng.integers(0, 19, (4, 4)).astype("<u2"),
        }
        decoded = safetensors_load(encode_record(record))
        assert records_equal(decoded, record)

    def test_empty_record(self):
        blob = encode_record({})
        assert header_of(blob) == {}
        assert decode_record(blob) == {}

    def test_names_sorted_lexicographically(self):
        record = {
            "z": np.zeros(1, dtype="<u2"),
            "a": np.ones(2, dtype="<u2"),
            "m": np.zeros(3, dtype="<u2"),
        }
        header = header_of(encode_record(record))
        assert list(header) == ["a", "m", "z"]
        offsets = [header[k]["data_offsets"] for k in ("a", "m", "z")]
        assert offsets == [[0, 4], [4, 10], [10, 12]]

    def test_header_independent_of_insertion_order(self):
        a = {"x": np.zeros(2, dtype="<f4"), "y": np.ones(2, dtype="<f4")}
        b = dict(reversed(list(a.items())))
        assert encode_record(a) == encode_record(b)

    def test_non_contiguous_input_normalized(self):
        base = np.arange(16, dtype="<u2").reshape(4, 4)
        blob = encode_record({"B02": base[:, ::2]})
        assert records_equal(decode_record(blob), {"B02": base[:, ::2].copy()})

    def test_unsupported_dtypes_rejected(self):
        for bad in (np.uint32, np.int64, np.float16, np.complex64):
            with pytest.raises(UnsupportedDtypeError):
                encode_record({"x": np.zeros(2, dtype=bad)})
        with pytest.raises(UnsupportedDtypeError):
            encode_record({"x": np.zeros(2, dtype=">u2")})

    def test_reserved_and_invalid_names_rejected(self):
        with pytest.raises(MalformedHeaderError):
            encode_record({"__metadata__": np.zeros(1, dtype="<u2")})
        with pytest.raises(MalformedHeaderError):
            encode_record({"": np.zeros(1, dtype="<u2")})


class TestDecode:
    def test_round_trip_bit_exact(self):
        record = {
            "B02": np.array([[1, 2], [3, 4]], dtype="<u2"),
            "VV": np.array([float("nan"), -1.5], dtype="<f4"),
        }
        out = decode_record(encode_record(record))
        assert records_equal(out, record)

    def test_zero_sized_dims(self):
        record = {"empty": np.zeros((0, 3), dtype="<f8"), "s": np.float32(2.5).reshape(())}
        out = decode_record(encode_record(record))
        assert out["empty"].shape == (0, 3)
        assert out["s"].shape == ()
        assert records_equal(out, record)

    def test_nan_payload_bits_preserved(self):
        payload = np.array([0x7FC00001, 0xFFC00000], dtype="<u4").view("<f4")
        out = decode_record(encode_record({"x": payload}))
        assert out["x"].tobytes() == payload.tobytes()

    def test_decodes_published_implementation_output(self):
        rng = np.random.default_rng(2)
        record = {
            "a": rng.integers(0, 255, (3, 2)).astype("uint8"),
            "b": rng.normal(size=5).astype("<f8"),
        }
        assert records_equal(decode_record(safetensors_save(record)), record)

    def test_metadata_block_tolerated(self):
        blob = safetensors_save(
            {"x": np.ones(2, dtype="<f4")}, metadata={"origin": "unit-test"}
        )
        assert records_equal(decode_record(blob), {"x": np.ones(2, dtype="<f4")})

    def test_overlapping_offsets_rejected(self):
        header = {
            "a": {"dtype": "U16", "shape": [2], "data_offsets": [0, 4]},
            "b": {"dtype": "U16", "shape": [2], "data_offsets": [2, 6]},
        }
        blob = self._forge(header, b"\x00" * 6)
        with pytest.raises(OffsetOverlapError):
            decode_record(blob)

    def test_gap_between_tensors_rejected(self):
        header = {
            "a": {"dtype": "U16", "shape": [1], "data_offsets": [0, 2]},
            "b": {"dtype": "U16", "shape": [1], "data_offsets": [4, 6]},
        }
        blob = self._forge(header, b"\x00" * 6)
        with pytest.raises(OffsetOverlapError):
            decode_record(blob)

    def test_uncovered_payload_tail_rejected(self):
        header = {"a": {"dtype": "U16", "shape": [1], "data_offsets": [0, 2]}}
        blob = self._forge(header, b"\x00" * 4)
        with pytest.raises(OffsetOverlapError):
            decode_record(blob)

    def test_truncated_payload_rejected(self):
        blob = encode_record({"B02": np.arange(4, dtype="<u2")})
        with pytest.raises(TruncatedPayloadError):
            decode_record(blob[:-1])

    def test_truncated_header_rejected(self):
        blob = encode_record({"B02": np.arange(4, dtype="<u2")})
        with pytest.raises(TruncatedPayloadError):
            decode_record(blob[:10])
        with pytest.raises(MalformedHeaderError):
            decode_record(blob[:4])

    def test_oversized_header_rejected(self):
        blob = struct.pack("<Q", 1 << 30) + b"{}"
        with pytest.raises(OversizedHeaderError):
            decode_record(blob)
        ok = encode_record({"x": np.zeros(1, dtype="uint8")})
        with pytest.raises(OversizedHeaderError):
            decode_record(ok, max_header_bytes=4)

    def test_malformed_json_rejected(self):
        body = b"not json" + b" " * 8
        blob = struct.pack("<Q", len(body)) + body
        with pytest.raises(MalformedHeaderError):
            decode_record(blob)

    def test_schema_violations_rejected(self):
        cases = [
            {"a": {"dtype": "U16", "shape": [1]}},  # missing offsets
            {"a": {"dtype": "U16", "shape": [-1], "data_offsets": [0, 2]}},
            {"a": {"dtype": "U16", "shape": [2], "data_offsets": [0, 2]}},  # size lies
            {"a": {"dtype": "U16", "shape": [1], "data_offsets": [0, 2], "pad": 1}},
            ["not", "a", "dict"],
        ]
        for header in cases:
            blob = self._forge(header, b"\x00" * 2)
            with pytest.raises(MalformedHeaderError):
                decode_record(blob)

    def test_unknown_dtype_rejected(self):
        header = {"a": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}
        with pytest.raises(UnsupportedDtypeError):
            decode_record(self._forge(header, b"\x00" * 2))

    @staticmethod
    def _forge(header, payload: bytes) -> bytes:
        body = json.dumps(header).encode()
        body += b" " * (-len(body) % 8)
        return struct.pack("<Q", len(body)) + body + payload


class TestRoundTripProperty:
    def test_thousand_random_records(self):
        rng = np.random.default_rng(20240810)
        for _ in range(1000):
            record = random_record(rng)
            blob = encode_record(record)
            decoded = decode_record(blob)
            assert records_equal(decoded, record)
            assert encode_record(decoded) == blob

    def test_against_published_implementation_on_random_records(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            record = random_record(rng)
            blob = encode_record(record)
            assert records_equal(safetensors_load(blob), record)
            theirs = safetensors_save(record)
            assert records_equal(decode_record(theirs), record)

    @settings(max_examples=200, deadline=None)
    @given(
        name=st.text(
            st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12
        ).filter(lambda s: s != "__metadata__"),
        dtype_key=st.sampled_from(sorted(DTYPES)),
        shape=st.lists(st.integers(0, 5), max_size=3),
        seed=st.integers(0, 2**31),
    )
    def test_hypothesis_round_trip(self, name, dtype_key, shape, seed):
        rng = np.random.default_rng(seed)
        dtype = DTYPES[dtype_key]
        if dtype.kind == "f":
            array = rng.normal(size=shape).astype(dtype)
        else:
            array = rng.integers(0, 100, size=shape).astype(dtype)
        record = {name: array}
        assert records_equal(decode_record(encode_record(record)), record)
