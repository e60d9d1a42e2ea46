"""Random-read benchmark: store lookups vs per-patch files.

Training loaders fetch records in random order, so the measured unit is
one keyed fetch including decoding.  The baseline opens and reads the
equivalent per-patch file for every lookup, which is exactly what a
loader over loose files does.  Sampled records are verified bit-exact
between the two sides before any timing runs.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from ..errors import ContentMismatchError, DomainError, NotAStoreError
from . import codec
from .lmdb import StoreHandle, StoreReader

BASELINE_SUFFIX = ".safetensors"


@dataclass(frozen=True)
class BenchmarkReport:
    """Lookup throughput for the store and the per-file baseline."""

    store_lps: Optional[float]
    baseline_lps: Optional[float]
    speedup: Optional[float]
    p50_us: Optional[float]
    p99_us: Optional[float]
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "store_lps": self.store_lps,
            "baseline_lps": self.baseline_lps,
            "speedup": self.speedup,
            "p50_us": self.p50_us,
            "p99_us": self.p99_us,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def export_baseline(
    entries: Iterable[tuple[str, codec.TensorMapping]], directory: Union[str, Path]
) -> int:
    """Write one serialized record file per patch; returns the file count."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = 0
    for key, record in entries:
        (directory / f"{key}{BASELINE_SUFFIX}").write_bytes(codec.encode_record(record))
        count += 1
    return count


def _baseline_path(directory: Path, key: str) -> Path:
    return directory / f"{key}{BASELINE_SUFFIX}"


def _reader_of(store: Union[StoreHandle, StoreReader, str, Path]) -> StoreReader:
    if isinstance(store, StoreReader):
        return store
    if isinstance(store, StoreHandle):
        return store.reader()
    return StoreReader(store)


def verify_against_baseline(
    store: Union[StoreHandle, StoreReader, str, Path],
    baseline_dir: Union[str, Path],
    keys: Optional[Iterable[str]] = None,
) -> int:
    """Bit-exact comparison of store records against baseline files.

    Checks the given keys (default: every key in the store) and returns
    the number verified; raises ``ContentMismatchError`` on the first
    disagreement or missing baseline file.
    """
    reader = _reader_of(store)
    baseline_dir = Path(baseline_dir)
    checked = 0
    for key in keys if keys is not None else reader.keys():
        path = _baseline_path(baseline_dir, key)
        if not path.exists():
            raise ContentMismatchError(f"baseline file missing for key {key!r}")
        store_record = codec.decode_record(reader.get(key))
        file_record = codec.decode_record(path.read_bytes())
        if not codec.records_equal(store_record, file_record):
            raise ContentMismatchError(f"store and baseline disagree for key {key!r}")
        checked += 1
    return checked


def measure_store_lookup_latency(
    store: Union[StoreHandle, StoreReader, str, Path],
    n: int,
    *,
    seed: int = 0,
    decode: bool = True,
) -> float:
    """Mean microseconds per random keyed fetch (decode included by default)."""
    reader = _reader_of(store)
    keys = list(reader.keys())
    if not keys:
        raise NotAStoreError("store has no entries to sample")
    rng = random.Random(seed)
    sample = [keys[rng.randrange(len(keys))] for _ in range(n)]
    get = reader.get
    decode_record = codec.decode_record
    start = time.perf_counter_ns()
    if decode:
        for key in sample:
            decode_record(get(key))
    else:
        for key in sample:
            get(key)
    elapsed = time.perf_counter_ns() - start
    return elapsed / max(1, n) / 1e3


def bench_random_read(
    store: Union[StoreHandle, StoreReader, str, Path],
    baseline_dir: Union[str, Path],
    n: int,
    *,
    seed: int = 0,
) -> BenchmarkReport:
    """Compare random-read throughput of the store against per-patch files.

    Every distinct sampled key is verified bit-exact between the two
    sides before timing.  ``n == 0`` yields an empty report.
    """
    if n < 0:
        raise DomainError(f"lookup count must be non-negative, got {n}")
    if n == 0:
        return BenchmarkReport(None, None, None, None, None, 0)
    reader = _reader_of(store)
    baseline_dir = Path(baseline_dir)
    keys = list(reader.keys())
    if not keys:
        raise NotAStoreError("store has no entries to sample")
    rng = random.Random(seed)
    sample = [keys[rng.randrange(len(keys))] for _ in range(n)]
    verify_against_baseline(reader, baseline_dir, sorted(set(sample)))

    get = reader.get
    decode_record = codec.decode_record
    latencies_ns = np.empty(n, dtype=np.int64)
    clock = time.perf_counter_ns
    for i, key in enumerate(sample):
        t0 = clock()
        decode_record(get(key))
        latencies_ns[i] = clock() - t0
    store_total = int(latencies_ns.sum())

    t0 = clock()
    for key in sample:
        with open(_baseline_path(baseline_dir, key), "rb") as fh:
            decode_record(fh.read())
    baseline_total = clock() - t0

    store_lps = n / (store_total / 1e9)
    baseline_lps = n / (baseline_total / 1e9)
    return BenchmarkReport(
        store_lps=store_lps,
        baseline_lps=baseline_lps,
        speedup=store_lps / baseline_lps,
        p50_us=float(np.percentile(latencies_ns, 50)) / 1e3,
        p99_us=float(np.percentile(latencies_ns, 99)) / 1e3,
        n=n,
    )
