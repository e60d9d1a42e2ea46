"""Read-only dataset views over a patch tensor store.

A view wraps the pipeline's store reader, so there is exactly one
implementation of store access; this package only adds the shapes
training code wants: key iteration, per-patch arrays, and modality
stacking in the pipeline's documented channel order.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from reben_pipeline.errors import MissingBandError
from reben_pipeline.pipeline import BAND_RESOLUTION_M, BandData, PatchPixels, prepare_model_input
from reben_pipeline.store.codec import decode_record
from reben_pipeline.store.lmdb import StoreReader


class DatasetView:
    """Lazy, read-only view of one store snapshot.

    Keys iterate in lexicographic order; nothing beyond the store header
    is read until a key or record is requested.  Open one view per worker
    process; a single view is not safe to share across concurrently
    executing workers.
    """

    def __init__(self, path: Union[str, Path]):
        self._reader = StoreReader(path)
        self._keys: Optional[tuple[str, ...]] = None

    @property
    def path(self) -> Path:
        return self._reader.path

    def __len__(self) -> int:
        return len(self._reader)

    def keys(self) -> tuple[str, ...]:
        if self._keys is None:
            self._keys = tuple(self._reader.keys())
        return self._keys

    def __iter__(self) -> Iterator[str]:
        return iter(self.keys())

    def __contains__(self, key: str) -> bool:
        return key in self._reader

    def raw(self, key: str) -> bytes:
        """Serialized record bytes exactly as stored."""
        return bytes(self._reader.get(key))

    def get(self, key: str) -> dict[str, np.ndarray]:
        """Named arrays of one patch, bit-exact with the store content."""
        return decode_record(self._reader.get(key))

    def __getitem__(self, key: str) -> dict[str, np.ndarray]:
        return self.get(key)

    def get_stacked(
        self, key: str, modality: str, target_resolution: float = 10.0
    ) -> np.ndarray:
        """One (channels, h, w) model input in the pipeline's channel order."""
        record = self.get(key)
        bands = {}
        for name, values in record.items():
            if name in BAND_RESOLUTION_M:
                bands[name] = BandData(values, BAND_RESOLUTION_M[name])
        if not bands:
            raise MissingBandError(f"record {key!r} holds no known bands")
        return prepare_model_input(PatchPixels(bands), modality, target_resolution)

    def close(self) -> None:
        self._reader.close()

    def __enter__(self) -> "DatasetView":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def open(path: Union[str, Path]) -> DatasetView:  # noqa: A001 - mirrors the builtin on purpose
    """Open a store produced by the pipeline as a dataset view."""
    return DatasetView(path)


def get(view: DatasetView, key: str) -> dict[str, np.ndarray]:
    return view.get(key)
