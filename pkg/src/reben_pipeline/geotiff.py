"""Single-band GeoTIFF-compatible raster I/O.

Wraps tifffile with the three georeferencing tags (pixel scale, tiepoint,
geokey directory) plus the GDAL nodata convention, which is all the
pipeline needs to exchange band and reference-map rasters with GIS
tooling.  Only north-up rasters with square pixels are supported.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import tifffile

from .errors import DomainError
from .geometry import PatchExtent
from .labeling import UNLABELED, ReferenceMap

_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEO_KEYS = 34735
_TAG_GDAL_NODATA = 42113

_KEY_MODEL_TYPE = 1024
_KEY_RASTER_TYPE = 1025
_KEY_GEOGRAPHIC_CRS = 2048
_KEY_PROJECTED_CRS = 3072

_ASCII, _SHORT, _DOUBLE = 2, 3, 12


@dataclass(frozen=True)
class BandRaster:
    """One single-band raster with its georeferencing."""

    values: np.ndarray
    origin_x: float
    origin_y_top: float
    resolution: float
    crs: str = ""
    nodata: Optional[float] = None

    @property
    def nodata_mask(self) -> np.ndarray:
        if self.nodata is None:
            return np.zeros(self.values.shape, dtype=bool)
        return self.values == self.values.dtype.type(self.nodata)


def _geokey_directory(crs: str) -> Optional[tuple[int, ...]]:
    if not crs.upper().startswith("EPSG:"):
        return None
    code = int(crs.split(":", 1)[1])
    geographic = code in range(4000, 5000)
    keys = [
        (_KEY_MODEL_TYPE, 0, 1, 2 if geographic else 1),
        (_KEY_RASTER_TYPE, 0, 1, 1),  # pixel is area
        (_KEY_GEOGRAPHIC_CRS if geographic else _KEY_PROJECTED_CRS, 0, 1, code),
    ]
    directory = [1, 1, 0, len(keys)]
    for key in keys:
        directory.extend(key)
    return tuple(directory)


def write_single_band(
    path: Union[str, Path],
    values: np.ndarray,
    *,
    origin_x: float,
    origin_y_top: float,
    resolution: float,
    crs: str = "",
    nodata: Optional[float] = None,
) -> None:
    """Write a 2-D array as a georeferenced single-band TIFF."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise DomainError(f"expected a 2-D band array, got shape {values.shape}")
    if not resolution > 0:
        raise DomainError(f"resolution must be positive, got {resolution}")
    extratags = [
        (_TAG_PIXEL_SCALE, _DOUBLE, 3, (resolution, resolution, 0.0), True),
        (_TAG_TIEPOINT, _DOUBLE, 6, (0.0, 0.0, 0.0, origin_x, origin_y_top, 0.0), True),
    ]
    geokeys = _geokey_directory(crs)
    if geokeys is not None:
        extratags.append((_TAG_GEO_KEYS, _SHORT, len(geokeys), geokeys, True))
    if nodata is not None:
        text = str(int(nodata)) if float(nodata).is_integer() else repr(float(nodata))
        extratags.append((_TAG_GDAL_NODATA, _ASCII, len(text) + 1, text, True))
    tifffile.imwrite(path, values, photometric="minisblack", extratags=extratags)


def _crs_from_geokeys(directory) -> str:
    entries = list(directory)
    n_keys = entries[3]
    for i in range(n_keys):
        key_id, location, _count, value = entries[4 + 4 * i : 8 + 4 * i]
        if key_id in (_KEY_PROJECTED_CRS, _KEY_GEOGRAPHIC_CRS) and location == 0:
            return f"EPSG:{value}"
    return ""


def read_single_band(path: Union[str, Path]) -> BandRaster:
    """Read a single-band TIFF written by this module (or compatible)."""
    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        values = page.asarray()
        tags = page.tags
        scale = tags.get(_TAG_PIXEL_SCALE)
        tiepoint = tags.get(_TAG_TIEPOINT)
        if scale is None or tiepoint is None:
            raise DomainError(f"{path} lacks georeferencing tags")
        resolution = float(scale.value[0])
        if abs(resolution - float(scale.value[1])) > 1e-9:
            raise DomainError(f"{path} has non-square pixels")
        tp = tiepoint.value
        origin_x = float(tp[3]) - float(tp[0]) * resolution
        origin_y_top = float(tp[4]) + float(tp[1]) * resolution
        crs = ""
        geo = tags.get(_TAG_GEO_KEYS)
        if geo is not None:
            crs = _crs_from_geokeys(geo.value)
        nodata = None
        nd_tag = tags.get(_TAG_GDAL_NODATA)
        if nd_tag is not None:
            nodata = float(str(nd_tag.value).strip().split()[0])
    return BandRaster(values, origin_x, origin_y_top, resolution, crs, nodata)


def write_reference_map(
    reference_map: ReferenceMap, patch: PatchExtent, path: Union[str, Path]
) -> None:
    """Store a reference map as uint16 with the unlabeled sentinel as nodata."""
    resolution = patch.size / reference_map.width
    write_single_band(
        path,
        reference_map.values,
        origin_x=patch.origin_x,
        origin_y_top=patch.origin_y + patch.size,
        resolution=resolution,
        crs=patch.crs,
        nodata=UNLABELED,
    )


def read_reference_map(path: Union[str, Path]) -> ReferenceMap:
    raster = read_single_band(path)
    if raster.values.dtype != np.uint16:
        raise DomainError(f"reference map {path} is not uint16")
    return ReferenceMap(raster.values)
