"""Nested-frame split assignment and spatial separation statistics.

A square tile is divided into three concentric regions: an outer frame
(training), an inner frame (validation) and the residual inner square
(test).  Region sizes are controlled by two area fractions: ``p`` is the
inner square's share of the tile area and ``q`` the inner frame's share,
so the outer frame holds the remaining ``1 - p - q``.  Assigning the
outer frame to training keeps patches from the overlap zone of adjacent
tiles inside a single split, and it maximizes the distance between
training and test patches.

All functions here are pure; callers may evaluate them in parallel over
patches without synchronization.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DomainError, EmptyTagError

#: Relative slack for containment checks on metric coordinates.
_REL_EPS = 1e-9


class SplitTag(enum.Enum):
    """Split membership of a retained patch."""

    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"

    def __str__(self) -> str:
        return self.value


#: Alias kept for call sites that talk about assignments rather than tags.
SplitAssignment = SplitTag


@dataclass(frozen=True)
class SquareExtent:
    """Axis-aligned square footprint in projected coordinates (meters).

    ``origin_x``/``origin_y`` name the minimum-coordinate corner.
    """

    origin_x: float
    origin_y: float
    size: float
    crs: str = ""

    def __post_init__(self) -> None:
        if not self.size > 0:
            raise DomainError(f"extent size must be positive, got {self.size}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin_x + self.size / 2.0, self.origin_y + self.size / 2.0)

    def contains_extent(self, other: "SquareExtent") -> bool:
        tol = _REL_EPS * self.size
        return (
            other.origin_x >= self.origin_x - tol
            and other.origin_y >= self.origin_y - tol
            and other.origin_x + other.size <= self.origin_x + self.size + tol
            and other.origin_y + other.size <= self.origin_y + self.size + tol
        )


@dataclass(frozen=True)
class PatchExtent:
    """One patch footprint inside a tile, identified by its grid cell.

    ``col`` counts along +x and ``row`` along +y from the tile origin.
    The derived ``patch_id`` is the store key and file-name stem.
    """

    tile_id: str
    col: int
    row: int
    origin_x: float
    origin_y: float
    size: float = 1200.0
    crs: str = ""

    def __post_init__(self) -> None:
        if self.col < 0 or self.row < 0:
            raise DomainError(f"col/row must be non-negative, got ({self.col}, {self.row})")
        if not self.size > 0:
            raise DomainError(f"patch size must be positive, got {self.size}")

    @property
    def patch_id(self) -> str:
        return f"{self.tile_id}_{self.col:02d}_{self.row:02d}"

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin_x + self.size / 2.0, self.origin_y + self.size / 2.0)

    @property
    def extent(self) -> SquareExtent:
        return SquareExtent(self.origin_x, self.origin_y, self.size, self.crs)


def frame_widths(s: float, p: float, q: float) -> tuple[float, float]:
    """Frame widths that realize the requested region area fractions.

    The inner square of area ``p*s**2`` has side ``sqrt(p)*s``; together
    with the inner frame it fills a square of side ``sqrt(p+q)*s``.  The
    widths follow from halving the leftover side lengths:

        f_o = (1 - sqrt(p+q)) / 2 * s
        f_i = (sqrt(p+q) - sqrt(p)) / 2 * s

    so the outer frame has area ``(1-p-q)*s**2``, the inner frame
    ``q*s**2`` and the inner square ``p*s**2``.
    """
    _check_geometry_params(s, p, q)
    root_pq = math.sqrt(p + q)
    f_o = (1.0 - root_pq) / 2.0 * s
    f_i = (root_pq - math.sqrt(p)) / 2.0 * s
    return f_o, f_i


def _check_geometry_params(s: float, p: float, q: float) -> None:
    if not s > 0:
        raise DomainError(f"tile side must be positive, got {s}")
    if p < 0 or q < 0:
        raise DomainError(f"area fractions must be non-negative, got p={p}, q={q}")
    if p + q > 1:
        raise DomainError(f"p + q must not exceed 1, got {p + q}")


@dataclass(frozen=True)
class SplitGeometry:
    """Validated nested-frame parameters for one tile side length.

    ``f_o`` and ``f_i`` are derived from ``(s, p, q)`` on construction.
    """

    s: float
    p: float = 0.25
    q: float = 0.25
    f_o: float = field(init=False)
    f_i: float = field(init=False)

    def __post_init__(self) -> None:
        f_o, f_i = frame_widths(self.s, self.p, self.q)
        object.__setattr__(self, "f_o", f_o)
        object.__setattr__(self, "f_i", f_i)

    def region_areas(self) -> tuple[float, float, float]:
        """(outer frame, inner frame, inner square) areas in m^2."""
        s2 = self.s * self.s
        return ((1.0 - self.p - self.q) * s2, self.q * s2, self.p * s2)

    @property
    def inner_square_half_side(self) -> float:
        return math.sqrt(self.p) * self.s / 2.0

    @property
    def inner_frame_half_side(self) -> float:
        return math.sqrt(self.p + self.q) * self.s / 2.0


def assign_split(patch: PatchExtent, tile_extent: SquareExtent, geom: SplitGeometry) -> SplitTag:
    """Tag a patch by where its center lies among the nested regions.

    A center exactly on a region boundary goes to the outer region, so
    ties can only bias toward training, never leak toward test.
    """
    if not tile_extent.contains_extent(patch.extent):
        raise DomainError(
            f"patch {patch.patch_id} extent exceeds its tile extent {tile_extent}"
        )
    if not math.isclose(geom.s, tile_extent.size, rel_tol=_REL_EPS):
        raise DomainError(
            f"split geometry side {geom.s} does not match tile size {tile_extent.size}"
        )
    cx, cy = tile_extent.center
    px, py = patch.center
    d = max(abs(px - cx), abs(py - cy))
    if d >= geom.inner_frame_half_side:
        return SplitTag.TRAIN
    if d >= geom.inner_square_half_side:
        return SplitTag.VALIDATION
    return SplitTag.TEST


#: Repeating 4x4 cell pattern of the grid-based baseline splitter, indexed
#: [row][col].  Eight train, four validation and four test cells yield the
#: 2:1:1 ratio while keeping train and test cells side by side, which is
#: the adjacency the nested-frame split is designed to remove.
GRID_BASELINE_PATTERN: tuple[tuple[SplitTag, ...], ...] = (
    (SplitTag.TRAIN, SplitTag.VALIDATION, SplitTag.TRAIN, SplitTag.TEST),
    (SplitTag.TEST, SplitTag.TRAIN, SplitTag.VALIDATION, SplitTag.TRAIN),
    (SplitTag.TRAIN, SplitTag.TEST, SplitTag.TRAIN, SplitTag.VALIDATION),
    (SplitTag.VALIDATION, SplitTag.TRAIN, SplitTag.TEST, SplitTag.TRAIN),
)


def assign_split_grid_baseline(patch: PatchExtent, cell_size: float) -> SplitTag:
    """Tag a patch from a fixed repeating pattern of grid cells.

    The tag is a pure function of ``(floor(x/cell), floor(y/cell))`` of the
    patch center, so all patches in one cell share a tag and the pattern
    repeats every four cells in each axis.
    """
    if not cell_size > 0:
        raise DomainError(f"cell size must be positive, got {cell_size}")
    cx, cy = patch.center
    col = math.floor(cx / cell_size)
    row = math.floor(cy / cell_size)
    return GRID_BASELINE_PATTERN[row % 4][col % 4]


@dataclass(frozen=True)
class SeparationPair:
    """Distance summary between the patches of two split tags."""

    from_tag: SplitTag
    to_tag: SplitTag
    min_m: float
    mean_m: float


@dataclass(frozen=True)
class SeparationReport:
    pairs: tuple[SeparationPair, ...]

    def pair(self, from_tag: SplitTag, to_tag: SplitTag) -> SeparationPair:
        for p in self.pairs:
            if p.from_tag is from_tag and p.to_tag is to_tag:
                return p
        raise KeyError((from_tag, to_tag))

    def to_dict(self) -> dict:
        return {
            "pairs": [
                {
                    "from": p.from_tag.value,
                    "to": p.to_tag.value,
                    "min_m": p.min_m,
                    "mean_m": p.mean_m,
                }
                for p in self.pairs
            ]
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _pairwise_min_mean(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    # chunk rows of a so the distance matrix stays below ~32 MB
    chunk = max(1, int(4e6) // max(1, len(b)))
    best = math.inf
    total = 0.0
    for start in range(0, len(a), chunk):
        d = np.sqrt(((a[start : start + chunk, None, :] - b[None, :, :]) ** 2).sum(-1))
        best = min(best, float(d.min()))
        total += float(d.sum())
    return best, total / (len(a) * len(b))


def separation_stats(
    assignments: Iterable[tuple[PatchExtent, SplitTag]],
) -> SeparationReport:
    """Minimum and mean center distances between every ordered tag pair.

    Raises ``EmptyTagError`` unless all three tags are present.
    """
    centers: dict[SplitTag, list[tuple[float, float]]] = {t: [] for t in SplitTag}
    for patch, tag in assignments:
        centers[tag].append(patch.center)
    for tag, pts in centers.items():
        if not pts:
            raise EmptyTagError(f"no patches tagged {tag.value}")
    arrays = {t: np.asarray(pts, dtype=float) for t, pts in centers.items()}
    pairs = []
    for from_tag in SplitTag:
        for to_tag in SplitTag:
            if from_tag is to_tag:
                continue
            min_m, mean_m = _pairwise_min_mean(arrays[from_tag], arrays[to_tag])
            pairs.append(SeparationPair(from_tag, to_tag, min_m, mean_m))
    return SeparationReport(tuple(pairs))


def patch_grid_assignments(
    tile_id: str,
    tile_extent: SquareExtent,
    geom: SplitGeometry,
    n: int,
) -> list[tuple[PatchExtent, SplitTag]]:
    """Assign an n x n patch grid covering the tile; convenience for studies."""
    if n <= 0:
        raise DomainError(f"grid size must be positive, got {n}")
    pitch = tile_extent.size / n
    out = []
    for row in range(n):
        for col in range(n):
            patch = PatchExtent(
                tile_id,
                col,
                row,
                tile_extent.origin_x + col * pitch,
                tile_extent.origin_y + row * pitch,
                pitch,
                tile_extent.crs,
            )
            out.append((patch, assign_split(patch, tile_extent, geom)))
    return out
