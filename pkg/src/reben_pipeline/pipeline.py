"""Tile-level orchestration: quality gating, tiling, screening, stacking.

Tiles that fail mandatory quality indicators never reach patch
generation.  Generated patches are screened into three dispositions:
patches containing invalid pixels are dropped outright, fully
snow- or cloud-covered patches stay in the dataset but are listed in
auxiliary files, and everything else forms the main set.  All operations
are pure per-tile or per-patch functions; workers may process disjoint
patches concurrently and per-class statistics merge associatively.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import (
    CrsMismatchError,
    DomainError,
    GridAlignmentError,
    MissingBandError,
    MissingIndicatorError,
)
from .geometry import PatchExtent, SplitTag, SquareExtent
from .labeling import DEFAULT_CLASS_NAMES, N_CLASSES, MultiLabelSet

#: Model-input channel order: ascending band number, then radar.
S2_MODEL_BANDS = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")
S1_MODEL_BANDS = ("VV", "VH")

#: Atmospheric bands at 60 m resolution, excluded from model inputs.
S2_EXCLUDED_BANDS = ("B01", "B09")

BAND_RESOLUTION_M = {
    "B01": 60.0,
    "B02": 10.0,
    "B03": 10.0,
    "B04": 10.0,
    "B05": 20.0,
    "B06": 20.0,
    "B07": 20.0,
    "B08": 10.0,
    "B8A": 20.0,
    "B09": 60.0,
    "B11": 20.0,
    "B12": 20.0,
    "VV": 10.0,
    "VH": 10.0,
}

_MANDATORY_INDICATORS = ("radiometric_ok", "geometric_ok")


class Modality(enum.Enum):
    S1 = "S1"
    S2 = "S2"
    S1_S2 = "S1+S2"

    def __str__(self) -> str:
        return self.value


def modality_channels(modality: Union[Modality, str]) -> tuple[str, ...]:
    """Documented fixed channel order for each modality."""
    modality = Modality(modality)
    if modality is Modality.S1:
        return S1_MODEL_BANDS
    if modality is Modality.S2:
        return S2_MODEL_BANDS
    return S2_MODEL_BANDS + S1_MODEL_BANDS


@dataclass(frozen=True)
class TileQualityReport:
    """Quality indicator outcomes for one tile."""

    tile_id: str
    radiometric_ok: bool
    geometric_ok: bool
    other_flags: Mapping[str, bool] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TileQualityReport":
        if "tile_id" not in doc:
            raise MissingIndicatorError("quality report without tile_id")
        for name in _MANDATORY_INDICATORS:
            if name not in doc:
                raise MissingIndicatorError(
                    f"quality report for {doc['tile_id']} lacks {name}"
                )
        other = {
            k: bool(v)
            for k, v in doc.items()
            if k not in ("tile_id", *_MANDATORY_INDICATORS)
        }
        return cls(
            str(doc["tile_id"]),
            bool(doc["radiometric_ok"]),
            bool(doc["geometric_ok"]),
            other,
        )


def check_quality(report: TileQualityReport) -> bool:
    """Pass only when every mandatory indicator is true.

    Non-mandatory flags are advisory and never fail the gate.
    """
    return report.radiometric_ok and report.geometric_ok


def tile_to_patches(
    tile_id: str, tile_extent: SquareExtent, patch_size: float = 1200.0
) -> list[PatchExtent]:
    """Non-overlapping patch grid anchored at the tile origin.

    The grid holds ``floor(side / patch_size)`` patches per axis; any
    residual margin at the far edges stays unpatched.
    """
    if not patch_size > 0:
        raise DomainError(f"patch size must be positive, got {patch_size}")
    n = int(tile_extent.size / patch_size + 1e-12)
    return [
        PatchExtent(
            tile_id,
            col,
            row,
            tile_extent.origin_x + col * patch_size,
            tile_extent.origin_y + row * patch_size,
            patch_size,
            tile_extent.crs,
        )
        for row in range(n)
        for col in range(n)
    ]


_BAND_DTYPES = (np.dtype("uint16"), np.dtype("int16"), np.dtype("float32"))


@dataclass(frozen=True)
class BandData:
    """One band of a patch at its native resolution."""

    values: np.ndarray
    resolution: float
    nodata: Optional[float] = None

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise DomainError(f"band array must be 2-D, got shape {self.values.shape}")
        if self.values.dtype not in _BAND_DTYPES:
            raise DomainError(f"unsupported band dtype {self.values.dtype}")
        if not self.resolution > 0:
            raise DomainError(f"band resolution must be positive: {self.resolution}")

    @property
    def nodata_mask(self) -> np.ndarray:
        if self.nodata is None:
            return np.zeros(self.values.shape, dtype=bool)
        return self.values == self.values.dtype.type(self.nodata)

    @property
    def extent_m(self) -> float:
        return self.values.shape[0] * self.resolution


@dataclass(frozen=True)
class PatchPixels:
    """All bands of one patch; every band covers the identical extent."""

    bands: Mapping[str, BandData]

    def __post_init__(self) -> None:
        extents = {
            name: (band.extent_m, band.values.shape)
            for name, band in self.bands.items()
        }
        for name, (extent, shp) in extents.items():
            if shp[0] != shp[1]:
                raise DomainError(f"band {name} is not square: {shp}")
        sizes = {round(extent, 6) for extent, _ in extents.values()}
        if len(sizes) > 1:
            raise DomainError(f"bands cover differing extents: {extents}")

    def has_invalid(self) -> bool:
        return any(band.nodata_mask.any() for band in self.bands.values())

    @property
    def extent_m(self) -> float:
        band = next(iter(self.bands.values()))
        return band.extent_m


@dataclass(frozen=True)
class PatchFlags:
    snow: bool = False
    cloud_or_shadow: bool = False
    has_invalid: bool = False


class Disposition(enum.Enum):
    MAIN = "main"
    AUXILIARY_LIST = "auxiliary_list"
    DROPPED = "dropped"


def screen_patch(pixels: Optional[PatchPixels], flags: PatchFlags) -> Disposition:
    """Route a patch: invalid data dominates, snow/cloud is auxiliary.

    A patch with any invalid pixel is dropped even if also flagged for
    snow or cloud, so unusable data never reaches the auxiliary lists.
    """
    has_invalid = flags.has_invalid or (pixels is not None and pixels.has_invalid())
    if has_invalid:
        return Disposition.DROPPED
    if flags.snow or flags.cloud_or_shadow:
        return Disposition.AUXILIARY_LIST
    return Disposition.MAIN


def extract_patch_window(raster, patch: PatchExtent) -> np.ndarray:
    """Cut one patch's pixel window out of a tile-level band raster.

    The patch must lie on the raster's pixel grid and inside its extent;
    the raster's row 0 is its northernmost row.
    """
    if raster.crs and patch.crs and raster.crs != patch.crs:
        raise CrsMismatchError(
            f"raster CRS {raster.crs!r} != patch CRS {patch.crs!r}"
        )
    res = raster.resolution
    col_f = (patch.origin_x - raster.origin_x) / res
    row_f = (raster.origin_y_top - (patch.origin_y + patch.size)) / res
    n_f = patch.size / res
    col, row, n = round(col_f), round(row_f), round(n_f)
    if max(abs(col_f - col), abs(row_f - row), abs(n_f - n)) > 1e-6:
        raise GridAlignmentError(
            f"patch {patch.patch_id} does not align with the raster pixel grid"
        )
    height, width = raster.values.shape
    if col < 0 or row < 0 or col + n > width or row + n > height:
        raise DomainError(
            f"patch {patch.patch_id} window exceeds the raster extent"
        )
    return raster.values[row : row + n, col : col + n]


def upsample_nearest(values: np.ndarray, factor: int) -> np.ndarray:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise DomainError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return values
    return np.repeat(np.repeat(values, factor, axis=0), factor, axis=1)


def prepare_model_input(
    pixels: PatchPixels,
    modality: Union[Modality, str],
    target_resolution: float = 10.0,
) -> np.ndarray:
    """Stack the modality's bands into one (channels, h, w) array.

    Coarser bands are upsampled to the target grid by nearest-neighbour
    replication; the 60 m atmospheric bands are never included.  The
    channel order is ``modality_channels(modality)`` for every patch.
    """
    names = modality_channels(modality)
    target_n = round(pixels.extent_m / target_resolution)
    channels = []
    for name in names:
        band = pixels.bands.get(name)
        if band is None:
            raise MissingBandError(f"modality {modality} requires band {name}")
        factor_f = band.resolution / target_resolution
        factor = round(factor_f)
        if factor < 1 or abs(factor_f - factor) > 1e-9:
            raise DomainError(
                f"band {name} at {band.resolution} m does not divide the"
                f" {target_resolution} m target grid"
            )
        values = upsample_nearest(band.values, factor)
        if values.shape != (target_n, target_n):
            raise DomainError(
                f"band {name} upsampled to {values.shape}, expected"
                f" ({target_n}, {target_n})"
            )
        channels.append(values)
    return np.stack(channels, axis=0)


_SPLIT_ORDER = (SplitTag.TRAIN, SplitTag.VALIDATION, SplitTag.TEST)


@dataclass(frozen=True)
class DatasetStats:
    """Per-class, per-split patch counts over main-disposition records."""

    counts: np.ndarray  # (N_CLASSES, 3) int64, columns train/validation/test
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self) -> None:
        if self.counts.shape != (N_CLASSES, 3):
            raise DomainError(f"counts must be ({N_CLASSES}, 3), got {self.counts.shape}")

    def row(self, class_index: int) -> tuple[int, int, int, int]:
        train, val, test = (int(v) for v in self.counts[class_index])
        return train, val, test, train + val + test

    def merge(self, other: "DatasetStats") -> "DatasetStats":
        if self.class_names != other.class_names:
            raise DomainError("cannot merge stats with differing class names")
        return DatasetStats(self.counts + other.counts, self.class_names)

    def to_dict(self) -> dict:
        classes = []
        for i, name in enumerate(self.class_names):
            train, val, test, total = self.row(i)
            classes.append(
                {
                    "name": name,
                    "train": train,
                    "validation": val,
                    "test": test,
                    "total": total,
                }
            )
        split_totals = self.counts.sum(axis=0)
        return {
            "classes": classes,
            "split_totals": {
                "train": int(split_totals[0]),
                "validation": int(split_totals[1]),
                "test": int(split_totals[2]),
            },
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


StatsRecord = tuple[str, SplitTag, MultiLabelSet, PatchFlags]


def dataset_stats(
    records: Iterable[StatsRecord],
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> DatasetStats:
    """Count label presence per class and split over clean patches only.

    Records whose flags exclude them from the main disposition (invalid
    pixels, snow, cloud) do not contribute to any count.
    """
    counts = np.zeros((N_CLASSES, 3), dtype=np.int64)
    for _patch_id, tag, labels, flags in records:
        if screen_patch(None, flags) is not Disposition.MAIN:
            continue
        col = _SPLIT_ORDER.index(tag)
        for class_index in labels.class_indices():
            counts[class_index, col] += 1
    return DatasetStats(counts, tuple(class_names))


def load_patch_id_list(path: Union[str, Path]) -> list[str]:
    """Read a newline-delimited patch-id list, ignoring blank lines."""
    lines = Path(path).read_text().splitlines()
    return [line.strip() for line in lines if line.strip()]


def save_patch_id_list(patch_ids: Iterable[str], path: Union[str, Path]) -> None:
    Path(path).write_text("".join(f"{pid}\n" for pid in sorted(patch_ids)))


def write_patch_sidecar(
    path: Union[str, Path],
    *,
    patch: PatchExtent,
    labels: Optional[MultiLabelSet],
    coverage: Optional[float],
    retention: Optional[str] = None,
    split: Optional[SplitTag] = None,
    flags: PatchFlags = PatchFlags(),
    channels: Optional[Sequence[str]] = None,
    class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
) -> None:
    """Write the per-patch JSON metadata sidecar."""
    doc = {
        "patch_id": patch.patch_id,
        "tile_id": patch.tile_id,
        "col": patch.col,
        "row": patch.row,
        "origin_x": patch.origin_x,
        "origin_y": patch.origin_y,
        "size_m": patch.size,
        "crs": patch.crs,
        "labels": list(labels.class_indices()) if labels is not None else None,
        "label_names": list(labels.class_names(class_names)) if labels is not None else None,
        "coverage": coverage,
        "retention": retention,
        "split": split.value if split is not None else None,
        "flags": {
            "snow": flags.snow,
            "cloud_or_shadow": flags.cloud_or_shadow,
            "has_invalid": flags.has_invalid,
        },
        "channels": list(channels) if channels is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_patch_sidecar(path: Union[str, Path]) -> dict:
    return json.loads(Path(path).read_text())


def sidecar_stats_record(doc: Mapping) -> StatsRecord:
    """Build a stats record from one sidecar document."""
    flags_doc = doc.get("flags") or {}
    flags = PatchFlags(
        snow=bool(flags_doc.get("snow", False)),
        cloud_or_shadow=bool(flags_doc.get("cloud_or_shadow", False)),
        has_invalid=bool(flags_doc.get("has_invalid", False)),
    )
    if doc.get("split") is None:
        raise DomainError(f"sidecar for {doc.get('patch_id')} lacks a split tag")
    labels = MultiLabelSet.from_indices(doc.get("labels") or [])
    return (str(doc["patch_id"]), SplitTag(doc["split"]), labels, flags)
