"""Pixel-level reference maps and scene-level multi-labels.

Land-cover polygons carrying level-3 CORINE codes are burned into a
per-patch class raster using pixel-center containment.  Codes collapse
into a 19-class nomenclature loaded from a two-column CSV, so the class
table can be swapped without touching code.  Coverage and label
extraction use exact integer arithmetic; the 75% retention boundary is
bit-exact.
"""

from __future__ import annotations

import csv
import enum
import json
import warnings
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import shapely
from shapely.geometry import shape as geojson_shape
from shapely.geometry.base import BaseGeometry
from shapely.validation import make_valid

from .errors import (
    CrsMismatchError,
    DomainError,
    GridAlignmentError,
    NoLabeledPixelsError,
)
from .geometry import PatchExtent

#: Sentinel stored for pixels without a mapped class (uint16 max).
UNLABELED = 65535

#: Number of classes in the scene-classification nomenclature.
N_CLASSES = 19

DEFAULT_CLASS_NAMES: tuple[str, ...] = (
    "Agro-forestry areas",
    "Arable land",
    "Beaches, dunes, sands",
    "Broad-leaved forest",
    "Coastal wetlands",
    "Complex cultivation patterns",
    "Coniferous forest",
    "Industrial or commercial units",
    "Inland waters",
    "Inland wetlands",
    "Land principally occupied by agriculture, with significant areas of"
    " natural vegetation",
    "Marine waters",
    "Mixed forest",
    "Moors, heathland and sclerophyllous vegetation",
    "Natural grassland and sparsely vegetated areas",
    "Pastures",
    "Permanent crops",
    "Transitional woodland, shrub",
    "Urban fabric",
)

FractionLike = Union[Fraction, int, float]


class OverlapWarning(UserWarning):
    """Input polygons overlap; a planar partition should not."""


@dataclass(frozen=True)
class ClassNomenclature:
    """Total mapping from level-3 codes to class indices.

    Every known code maps to an index in ``[0, N_CLASSES)`` or explicitly
    to ``None`` (dropped from the nomenclature).  Codes absent from the
    table are treated as unmapped at rasterization time.
    """

    mapping: Mapping[str, Optional[int]]
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self) -> None:
        if len(self.class_names) != N_CLASSES:
            raise DomainError(
                f"expected {N_CLASSES} class names, got {len(self.class_names)}"
            )
        seen = set()
        for code, idx in self.mapping.items():
            if idx is None:
                continue
            if not 0 <= idx < N_CLASSES:
                raise DomainError(f"class index {idx} for code {code} out of range")
            seen.add(idx)
        missing = set(range(N_CLASSES)) - seen
        if missing:
            raise DomainError(f"no level-3 code maps to class indices {sorted(missing)}")

    def class_index(self, code: str) -> Optional[int]:
        return self.mapping.get(str(code))

    @property
    def codes(self) -> frozenset[str]:
        return frozenset(self.mapping)

    @classmethod
    def from_csv(
        cls, path: Union[str, Path], class_names: Sequence[str] = DEFAULT_CLASS_NAMES
    ) -> "ClassNomenclature":
        """Load a two-column table: level-3 code, class index or ``-``."""
        mapping: dict[str, Optional[int]] = {}
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                code, idx = row[0].strip(), row[1].strip()
                if not code.isdigit():  # header line
                    continue
                mapping[code] = None if idx == "-" else int(idx)
        if not mapping:
            raise DomainError(f"no code rows found in nomenclature file {path}")
        return cls(mapping, tuple(class_names))

    @classmethod
    def default(cls) -> "ClassNomenclature":
        ref = resources.files("reben_pipeline.data").joinpath("clc_level3_to_19.csv")
        with resources.as_file(ref) as path:
            return cls.from_csv(path)


@dataclass(frozen=True)
class LandCoverPolygonSet:
    """Land-cover polygons with their level-3 codes, in one CRS."""

    polygons: tuple[tuple[BaseGeometry, str], ...]
    crs: str = ""

    def validate(self) -> None:
        for geom, code in self.polygons:
            if not geom.is_valid:
                raise DomainError(f"invalid geometry for code {code}: {geom.wkt[:80]}")
            if not str(code).isdigit() or len(str(code)) != 3:
                raise DomainError(f"not a 3-digit level-3 code: {code!r}")

    @classmethod
    def from_geojson(cls, doc: Mapping, default_crs: str = "") -> "LandCoverPolygonSet":
        """Read a FeatureCollection whose features carry a CODE_18 property.

        Invalid geometries are normalized with ``make_valid``.  The CRS may
        be given as a plain string member or the legacy named-CRS object.
        """
        crs = doc.get("crs", default_crs)
        if isinstance(crs, Mapping):
            crs = crs.get("properties", {}).get("name", default_crs)
        polygons = []
        for feature in doc.get("features", []):
            props = feature.get("properties") or {}
            if "CODE_18" not in props:
                raise DomainError("feature without CODE_18 property")
            code = str(props["CODE_18"])
            geom = geojson_shape(feature["geometry"])
            if not geom.is_valid:
                geom = make_valid(geom)
            polygons.append((geom, code))
        return cls(tuple(polygons), str(crs))

    @classmethod
    def from_geojson_dir(
        cls, directory: Union[str, Path], default_crs: str = ""
    ) -> "LandCoverPolygonSet":
        """Concatenate every ``*.geojson``/``*.json`` file in a directory."""
        directory = Path(directory)
        files = sorted(
            p for p in directory.iterdir() if p.suffix in (".geojson", ".json")
        )
        if not files:
            raise DomainError(f"no GeoJSON files in {directory}")
        polygons: list[tuple[BaseGeometry, str]] = []
        crs = default_crs
        for path in files:
            part = cls.from_geojson(json.loads(path.read_text()), default_crs)
            if part.crs and crs and part.crs != crs:
                raise CrsMismatchError(
                    f"mixed CRS in polygon directory: {part.crs} vs {crs}"
                )
            crs = part.crs or crs
            polygons.extend(part.polygons)
        return cls(tuple(polygons), crs)


@dataclass(frozen=True)
class ReferenceMap:
    """Per-pixel class raster for one patch.

    Values are class indices in ``[0, N_CLASSES)`` or ``UNLABELED``.
    Row 0 is the northernmost pixel row.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.dtype != np.uint16:
            raise DomainError("reference map must be a 2-D uint16 array")
        labeled = v[v != UNLABELED]
        if labeled.size and int(labeled.max()) >= N_CLASSES:
            raise DomainError("reference map contains out-of-range class indices")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def pixel_count(self) -> int:
        return self.values.size

    @property
    def labeled_pixel_count(self) -> int:
        return int((self.values != UNLABELED).sum())

    def class_counts(self) -> np.ndarray:
        """Pixel count per class index, length ``N_CLASSES``."""
        labeled = self.values[self.values != UNLABELED]
        return np.bincount(labeled.astype(np.int64), minlength=N_CLASSES)


@dataclass(frozen=True)
class MultiLabelSet:
    """Presence bits for the 19 scene classes."""

    bits: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.bits) != N_CLASSES:
            raise DomainError(f"expected {N_CLASSES} bits, got {len(self.bits)}")

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "MultiLabelSet":
        wanted = set(indices)
        if any(i < 0 or i >= N_CLASSES for i in wanted):
            raise DomainError(f"class index out of range in {sorted(wanted)}")
        return cls(tuple(i in wanted for i in range(N_CLASSES)))

    def class_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def class_names(self, names: Sequence[str] = DEFAULT_CLASS_NAMES) -> tuple[str, ...]:
        return tuple(names[i] for i in self.class_indices())

    def __len__(self) -> int:
        return sum(self.bits)


class RetentionReason(enum.Enum):
    KEPT = "kept"
    NO_LABELS = "no_labels"
    LOW_COVERAGE = "low_coverage"


@dataclass(frozen=True)
class RetentionDecision:
    keep: bool
    coverage: Fraction
    reason: RetentionReason

    def __post_init__(self) -> None:
        if self.keep != (self.reason is RetentionReason.KEPT):
            raise DomainError("keep flag inconsistent with retention reason")


def pixel_center_grid(
    patch: PatchExtent, resolution: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pixel-center coordinates of the patch grid, row 0 northernmost.

    Returns flattened (xs, ys) of length n*n and the grid side n.
    """
    if not resolution > 0:
        raise DomainError(f"resolution must be positive, got {resolution}")
    n_f = patch.size / resolution
    n = round(n_f)
    if n < 1 or abs(n_f - n) > 1e-9:
        raise GridAlignmentError(
            f"resolution {resolution} does not divide patch size {patch.size}"
        )
    cols = patch.origin_x + (np.arange(n) + 0.5) * resolution
    rows = patch.origin_y + patch.size - (np.arange(n) + 0.5) * resolution
    xs, ys = np.meshgrid(cols, rows)
    return xs.ravel(), ys.ravel(), n


def rasterize_reference_map(
    polygons: LandCoverPolygonSet,
    patch: PatchExtent,
    resolution: float,
    nomenclature: ClassNomenclature,
) -> ReferenceMap:
    """Burn polygons into the patch pixel grid by pixel-center containment.

    A pixel takes the class of the last listed polygon covering its
    center; polygons with codes outside the nomenclature leave pixels
    unlabeled.  Overlapping coverage triggers an ``OverlapWarning`` since
    the source map is expected to be a planar partition.
    """
    if polygons.crs and patch.crs and polygons.crs != patch.crs:
        raise CrsMismatchError(
            f"polygon CRS {polygons.crs!r} != patch CRS {patch.crs!r}"
        )
    xs, ys, n = pixel_center_grid(patch, resolution)
    out = np.full(n * n, UNLABELED, dtype=np.uint16)
    cover_count = np.zeros(n * n, dtype=np.uint16)
    for geom, code in polygons.polygons:
        shapely.prepare(geom)
        covered = shapely.intersects_xy(geom, xs, ys)
        if not covered.any():
            continue
        cover_count[covered] += 1
        idx = nomenclature.class_index(code)
        out[covered] = UNLABELED if idx is None else idx
    if (cover_count > 1).any():
        warnings.warn(
            f"{int((cover_count > 1).sum())} pixel centers covered by more than"
            " one polygon; later polygons win",
            OverlapWarning,
            stacklevel=2,
        )
    return ReferenceMap(out.reshape(n, n))


def coverage_fraction(reference_map: ReferenceMap) -> Fraction:
    """Labeled share of the map as an exact rational."""
    return Fraction(reference_map.labeled_pixel_count, reference_map.pixel_count)


def extract_multilabels(
    reference_map: ReferenceMap, min_fraction: FractionLike = 0
) -> MultiLabelSet:
    """Set bit c when class c exceeds ``min_fraction`` of labeled pixels.

    The comparison is strict and exact, so the default of 0 means a single
    pixel is enough.  Raises ``NoLabeledPixelsError`` on all-unlabeled maps.
    """
    threshold = Fraction(min_fraction)
    if not 0 <= threshold < 1:
        raise DomainError(f"min_fraction must be in [0, 1), got {min_fraction}")
    counts = reference_map.class_counts()
    labeled = int(counts.sum())
    if labeled == 0:
        raise NoLabeledPixelsError("cannot extract labels from an all-unlabeled map")
    bits = tuple(Fraction(int(c), labeled) > threshold for c in counts)
    return MultiLabelSet(bits)


def retention_decision(
    reference_map: ReferenceMap, threshold: FractionLike = Fraction(3, 4)
) -> RetentionDecision:
    """Keep a patch iff it has labels and coverage is at least ``threshold``.

    Coverage exactly at the threshold is kept; only strictly lower
    coverage drops the patch.  A map with no labeled pixel at all is
    reported as ``NO_LABELS`` regardless of the threshold.
    """
    threshold = Fraction(threshold)
    if not 0 < threshold <= 1:
        raise DomainError(f"threshold must be in (0, 1], got {threshold}")
    coverage = coverage_fraction(reference_map)
    if reference_map.labeled_pixel_count == 0:
        return RetentionDecision(False, coverage, RetentionReason.NO_LABELS)
    if coverage < threshold:
        return RetentionDecision(False, coverage, RetentionReason.LOW_COVERAGE)
    return RetentionDecision(True, coverage, RetentionReason.KEPT)
