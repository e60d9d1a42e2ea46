import numpy as np
import pytest

import reben_reader
from reben_pipeline.errors import KeyNotFoundError, NotAStoreError
from reben_pipeline.pipeline import modality_channels
from reben_pipeline.store import codec
from reben_pipeline.store.lmdb import StoreWriter


class TestOpen:
    def test_valid_store(self, conformance_store):
        path, expected = conformance_store
        with reben_reader.open(path) as view:
            assert len(view) == len(expected)

    def test_nonexistent_path(self, tmp_path):
        with pytest.raises(NotAStoreError):
            reben_reader.open(tmp_path / "missing.mdb")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "junk.mdb"
        path.write_bytes(b"\x00" * 16384)
        with pytest.raises(NotAStoreError):
            reben_reader.open(path)

    def test_length_known_before_keys_are_loaded(self, conformance_store):
        path, expected = conformance_store
        with reben_reader.open(path) as view:
            assert view._keys is None
            assert len(view) == len(expected)
            assert view._keys is None  # len comes from the header, not a scan


class TestKeysAndGet:
    def test_keys_lexicographic_and_stable(self, conformance_store):
        path, expected = conformance_store
        with reben_reader.open(path) as view:
            keys = view.keys()
            assert list(keys) == sorted(expected)
            assert view.keys() is keys  # cached
            assert list(iter(view)) == list(keys)

    def test_get_returns_expected_arrays(self, conformance_store):
        path, expected = conformance_store
        with reben_reader.open(path) as view:
            for key in ("patch_00000", "patch_00011", "patch_00042"):
                got = view.get(key)
                assert codec.records_equal(got, expected[key])
            assert codec.records_equal(view["patch_00005"], expected["patch_00005"])
            assert reben_reader.get(view, "patch_00007")

    def test_absent_key(self, conformance_store):
        path, _ = conformance_store
        with reben_reader.open(path) as view:
            with pytest.raises(KeyNotFoundError):
                view.get("absent")
            assert "absent" not in view
            assert "patch_00001" in view


class TestStacking:
    def test_channel_selection_mirrors_pipeline_order(self, tmp_path):
        rng = np.random.default_rng(0)
        record = {}
        for name in ("B02", "B03", "B04", "B08", "VV", "VH"):
            record[name] = (
                rng.normal(size=(12, 12)).astype("<f4")
                if name.startswith("V")
                else rng.integers(0, 65_535, (12, 12)).astype("<u2")
            )
        for name in ("B05", "B06", "B07", "B8A", "B11", "B12"):
            record[name] = rng.integers(0, 65_535, (6, 6)).astype("<u2")
        record["reference_map"] = rng.integers(0, 19, (12, 12)).astype("<u2")
        path = tmp_path / "stack.mdb"
        with StoreWriter(path) as writer:
            writer.put("p", codec.encode_record(record))
            writer.close()
        with reben_reader.open(path) as view:
            stacked = view.get_stacked("p", "S1+S2")
            names = modality_channels("S1+S2")
            assert stacked.shape == (12, 12, 12)
            assert np.array_equal(stacked[0], record["B02"].astype(stacked.dtype))
            assert np.array_equal(
                stacked[names.index("VV")], record["VV"].astype(stacked.dtype)
            )
            # coarse band upsampled into its slot by replication
            b05 = stacked[names.index("B05")]
            assert np.array_equal(b05[::2, ::2], record["B05"].astype(stacked.dtype))
