import numpy as np
import pytest

from reben_pipeline.store import codec
from reben_pipeline.store.lmdb import StoreWriter


def conformance_record(i: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(i)
    if i % 7 == 0:  # small inline values
        return {"x": rng.integers(0, 255, (2, 2)).astype("uint8")}
    if i % 11 == 0:  # zero-sized and NaN-bearing tensors
        vv = rng.normal(size=(3, 3)).astype("<f4")
        vv[0, 0] = np.nan
        return {"empty": np.zeros((0, 4), dtype="<f8"), "VV": vv}
    return {
        "B02": rng.integers(0, 65_535, (60, 60)).astype("<u2"),
        "B8A": rng.integers(0, 65_535, (30, 30)).astype("<u2"),
        "VV": rng.normal(size=(60, 60)).astype("<f4"),
        "reference_map": rng.integers(0, 19, (60, 60)).astype("<u2"),
    }


@pytest.fixture(scope="session")
def conformance_store(tmp_path_factory):
    """Store of 300 mixed records plus the expected per-key content."""
    root = tmp_path_factory.mktemp("conformance")
    path = root / "conformance.mdb"
    expected = {f"patch_{i:05d}": conformance_record(i) for i in range(300)}
    with StoreWriter(path) as writer:
        for key, record in expected.items():
            writer.put(key, codec.encode_record(record))
        writer.close()
    return path, expected
