"""Command-line interface: the pipeline as reproducible subcommands.

Every run resolves its configuration from defaults, then the config
file, then command-line flags, and writes a JSON manifest holding the
resolved config, its hash, digests of the named inputs and the headline
counts, so identical inputs and settings produce identical manifests
apart from the timestamp.

Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .config import RunConfig
from .errors import DomainError, PipelineError
from .geometry import (
    PatchExtent,
    SplitGeometry,
    SplitTag,
    SquareExtent,
    assign_split,
    assign_split_grid_baseline,
    separation_stats,
)
from .geotiff import read_single_band, write_reference_map, write_single_band
from .labeling import (
    ClassNomenclature,
    LandCoverPolygonSet,
    RetentionReason,
    extract_multilabels,
    rasterize_reference_map,
    retention_decision,
)
from .pipeline import (
    BAND_RESOLUTION_M,
    PatchFlags,
    TileQualityReport,
    check_quality,
    dataset_stats,
    extract_patch_window,
    load_patch_id_list,
    modality_channels,
    read_patch_sidecar,
    sidecar_stats_record,
    tile_to_patches,
    write_patch_sidecar,
)
from .store import codec
from .store.bench import bench_random_read, export_baseline
from .store.lmdb import StoreHandle, StoreMode, StoreWriter

log = logging.getLogger("reben_pipeline")

EXIT_DATA_ERROR = 3
EXIT_IO_ERROR = 4


@dataclass
class CliState:
    config: RunConfig
    config_path: Optional[Path]


def _setup_logging() -> None:
    level_name = os.environ.get("REBEN_PIPELINE_LOG", "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_path(path: Path) -> str:
    """Digest of a file, or of a directory's sorted (name, digest) listing."""
    if path.is_dir():
        h = hashlib.sha256()
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(child.relative_to(path)).encode())
            h.update(bytes.fromhex(_digest_file(child)))
        return h.hexdigest()
    return _digest_file(path)


def _write_manifest(
    out_dir: Path,
    subcommand: str,
    config: RunConfig,
    inputs: dict[str, Path],
    counts: dict,
    artifacts: dict[str, str],
) -> Path:
    doc = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "inputs": {
            name: {"path": str(path), "sha256": _digest_path(path)}
            for name, path in inputs.items()
        },
        "counts": counts,
        "artifacts": artifacts,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _guarded(func):
    """Map library errors to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except PipelineError as exc:
            log.error("%s", exc)
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA_ERROR)
        except OSError as exc:
            log.error("%s", exc)
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO_ERROR)

    return wrapper


def _resolve(ctx: click.Context, **flag_overrides) -> RunConfig:
    state: CliState = ctx.obj
    return state.config.with_overrides(**flag_overrides)


def _out_dir(config: RunConfig) -> Path:
    if not config.out_dir:
        raise DomainError("an output directory is required (--out-dir or config)")
    return Path(config.out_dir)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="Run configuration file (TOML).")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None,
              help="Directory for artifacts and the run manifest.")
@click.option("--seed", type=int, default=None, help="Seed for any sampling.")
@click.option("--jobs", type=int, default=None,
              help="Worker processes for per-patch work (default: config).")
@click.pass_context
def main(ctx, config_path, out_dir, seed, jobs):
    """Build DL-ready patch datasets and pack them into a tensor store."""
    _setup_logging()
    try:
        config = RunConfig.from_file(config_path) if config_path else RunConfig()
        config = config.with_overrides(
            out_dir=str(out_dir) if out_dir else None, seed=seed, jobs=jobs
        )
    except PipelineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DATA_ERROR)
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO_ERROR)
    ctx.obj = CliState(config=config, config_path=config_path)


def _load_tiles(path: Path) -> list[tuple[SquareExtent, TileQualityReport]]:
    doc = json.loads(path.read_text())
    tiles = []
    for entry in doc:
        extent = SquareExtent(
            float(entry["origin_x"]),
            float(entry["origin_y"]),
            float(entry["size_m"]),
            str(entry.get("crs", "")),
        )
        report = TileQualityReport.from_dict(
            {"tile_id": entry["tile_id"], **entry.get("quality", {})}
        )
        tiles.append((extent, report))
    return tiles


def _patch_from_doc(doc: dict) -> PatchExtent:
    return PatchExtent(
        doc["tile_id"],
        int(doc["col"]),
        int(doc["row"]),
        float(doc["origin_x"]),
        float(doc["origin_y"]),
        float(doc["size_m"]),
        str(doc.get("crs", "")),
    )


def _load_patches(path: Path) -> list[PatchExtent]:
    patches = []
    for line in path.read_text().splitlines():
        if line.strip():
            patches.append(_patch_from_doc(json.loads(line)))
    return patches


@main.command()
@click.option("--tiles", "tiles_path", required=True, type=click.Path(exists=True, path_type=Path),
              help="JSON list of tile extents with quality reports.")
@click.option("--bands-dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              default=None,
              help="Tile-level band rasters named {tile_id}_{band}.tif; when given,"
                   " per-patch band files are cut into <out-dir>/bands.")
@click.option("--patch-size-m", type=float, default=None)
@click.pass_context
@_guarded
def tile(ctx, tiles_path, bands_dir, patch_size_m):
    """Gate tiles on quality and cut the survivors into patches."""
    config = _resolve(ctx, patch_size_m=patch_size_m)
    out_dir = _out_dir(config)
    tiles = _load_tiles(tiles_path)
    passed = [(extent, report) for extent, report in tiles if check_quality(report)]
    for _extent, report in tiles:
        if not check_quality(report):
            log.info("tile %s failed mandatory quality indicators", report.tile_id)
    patches = []
    for extent, report in passed:
        patches.extend(tile_to_patches(report.tile_id, extent, config.patch_size_m))
    out_dir.mkdir(parents=True, exist_ok=True)
    patches_path = out_dir / "patches.jsonl"
    with open(patches_path, "w") as fh:
        for patch in patches:
            fh.write(json.dumps({
                "patch_id": patch.patch_id,
                "tile_id": patch.tile_id,
                "col": patch.col,
                "row": patch.row,
                "origin_x": patch.origin_x,
                "origin_y": patch.origin_y,
                "size_m": patch.size,
                "crs": patch.crs,
            }) + "\n")
    counts = {
        "tiles_total": len(tiles),
        "tiles_passed": len(passed),
        "tiles_failed": len(tiles) - len(passed),
        "patches": len(patches),
    }
    artifacts = {"patches": "patches.jsonl"}
    inputs = {"tiles": tiles_path}
    if bands_dir is not None:
        invalid = _cut_patch_bands(bands_dir, patches, out_dir / "bands")
        (out_dir / "invalid.txt").write_text("".join(f"{pid}\n" for pid in sorted(invalid)))
        counts["patches_with_invalid"] = len(invalid)
        artifacts["bands"] = "bands"
        artifacts["invalid"] = "invalid.txt"
        inputs["bands"] = bands_dir
    _write_manifest(out_dir, "tile", config, inputs, counts, artifacts)
    click.echo(json.dumps(counts))


def _cut_patch_bands(bands_dir: Path, patches, out_bands: Path) -> set[str]:
    """Slice per-patch windows from tile band rasters.

    Returns the ids of patches holding at least one nodata pixel in any
    band, which the labeling stage records as invalid-data patches.
    """
    by_tile: dict[str, list[PatchExtent]] = {}
    for patch in patches:
        by_tile.setdefault(patch.tile_id, []).append(patch)
    out_bands.mkdir(parents=True, exist_ok=True)
    invalid: set[str] = set()
    seen_tiles: set[str] = set()
    for path in sorted(bands_dir.glob("*.tif")):
        stem = path.stem
        tile_id, _, band = stem.rpartition("_")
        if band not in BAND_RESOLUTION_M or tile_id not in by_tile:
            log.warning("ignoring %s: not a {tile_id}_{band}.tif raster", path.name)
            continue
        seen_tiles.add(tile_id)
        raster = read_single_band(path)
        for patch in by_tile[tile_id]:
            window = extract_patch_window(raster, patch)
            if raster.nodata is not None and (
                window == window.dtype.type(raster.nodata)
            ).any():
                invalid.add(patch.patch_id)
            write_single_band(
                out_bands / f"{patch.patch_id}_{band}.tif",
                window,
                origin_x=patch.origin_x,
                origin_y_top=patch.origin_y + patch.size,
                resolution=raster.resolution,
                crs=patch.crs or raster.crs,
                nodata=raster.nodata,
            )
    missing = set(by_tile) - seen_tiles
    if missing:
        raise DomainError(f"no band rasters found for tiles: {sorted(missing)}")
    return invalid


@dataclass(frozen=True)
class _LabelJob:
    """Per-patch labeling work, picklable for the worker pool."""

    polygons: LandCoverPolygonSet
    nomenclature: ClassNomenclature
    resolution_m: float
    coverage_threshold: float
    min_label_fraction: float
    maps_dir: Path
    sidecar_dir: Path
    channels: tuple[str, ...]
    snow: frozenset[str]
    cloud: frozenset[str]
    invalid: frozenset[str]

    def __call__(self, patch: PatchExtent) -> tuple[str, str]:
        reference = rasterize_reference_map(
            self.polygons, patch, self.resolution_m, self.nomenclature
        )
        decision = retention_decision(reference, self.coverage_threshold)
        labels = None
        if reference.labeled_pixel_count > 0:
            labels = extract_multilabels(reference, self.min_label_fraction)
        write_reference_map(
            reference, patch, self.maps_dir / f"{patch.patch_id}_reference_map.tif"
        )
        write_patch_sidecar(
            self.sidecar_dir / f"{patch.patch_id}.json",
            patch=patch,
            labels=labels,
            coverage=float(decision.coverage),
            retention=decision.reason.value,
            flags=PatchFlags(
                snow=patch.patch_id in self.snow,
                cloud_or_shadow=patch.patch_id in self.cloud,
                has_invalid=patch.patch_id in self.invalid,
            ),
            channels=self.channels,
            class_names=self.nomenclature.class_names,
        )
        return patch.patch_id, decision.reason.value


@main.command()
@click.option("--patches", "patches_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--polygons", "polygons_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--nomenclature", "nomenclature_path",
              type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--coverage-threshold", type=float, default=None)
@click.option("--min-label-fraction", type=float, default=None)
@click.option("--resolution-m", type=float, default=None)
@click.option("--snow-list", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--cloud-list", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--invalid-list", type=click.Path(exists=True, path_type=Path), default=None)
@click.pass_context
@_guarded
def label(ctx, patches_path, polygons_dir, nomenclature_path, coverage_threshold,
          min_label_fraction, resolution_m, snow_list, cloud_list, invalid_list):
    """Rasterize reference maps, extract labels and decide retention."""
    config = _resolve(
        ctx,
        nomenclature_path=str(nomenclature_path) if nomenclature_path else None,
        coverage_threshold=coverage_threshold,
        min_label_fraction=min_label_fraction,
        resolution_m=resolution_m,
    )
    out_dir = _out_dir(config)
    nomenclature = (
        ClassNomenclature.from_csv(config.nomenclature_path)
        if config.nomenclature_path
        else ClassNomenclature.default()
    )
    polygons = LandCoverPolygonSet.from_geojson_dir(polygons_dir)
    patches = _load_patches(patches_path)

    maps_dir = out_dir / "reference_maps"
    sidecar_dir = out_dir / "sidecars"
    maps_dir.mkdir(parents=True, exist_ok=True)
    sidecar_dir.mkdir(parents=True, exist_ok=True)
    job = _LabelJob(
        polygons=polygons,
        nomenclature=nomenclature,
        resolution_m=config.resolution_m,
        coverage_threshold=config.coverage_threshold,
        min_label_fraction=config.min_label_fraction,
        maps_dir=maps_dir,
        sidecar_dir=sidecar_dir,
        channels=modality_channels(config.modality),
        snow=frozenset(load_patch_id_list(snow_list)) if snow_list else frozenset(),
        cloud=frozenset(load_patch_id_list(cloud_list)) if cloud_list else frozenset(),
        invalid=frozenset(load_patch_id_list(invalid_list)) if invalid_list else frozenset(),
    )
    if config.jobs > 1 and len(patches) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(job, patches, chunksize=16))
    else:
        results = [job(patch) for patch in patches]

    counts = {"patches": len(patches), "kept": 0, "dropped_no_labels": 0,
              "dropped_low_coverage": 0}
    retained = []
    for patch_id, reason in results:
        if reason == RetentionReason.KEPT.value:
            counts["kept"] += 1
            retained.append(patch_id)
        elif reason == RetentionReason.NO_LABELS.value:
            counts["dropped_no_labels"] += 1
        else:
            counts["dropped_low_coverage"] += 1
    (out_dir / "retained.txt").write_text("".join(f"{pid}\n" for pid in retained))
    inputs = {"patches": patches_path, "polygons": polygons_dir}
    for name, path in (("snow_list", snow_list), ("cloud_list", cloud_list),
                       ("invalid_list", invalid_list)):
        if path:
            inputs[name] = path
    _write_manifest(out_dir, "label", config, inputs, counts,
                    {"reference_maps": "reference_maps", "sidecars": "sidecars",
                     "retained": "retained.txt"})
    click.echo(json.dumps(counts))


@main.command()
@click.option("--patches", "patches_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--tiles", "tiles_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--p", type=float, default=None, help="Inner-square area fraction.")
@click.option("--q", type=float, default=None, help="Inner-frame area fraction.")
@click.option("--grid-baseline", is_flag=True, default=False,
              help="Use the repeating-cell baseline splitter instead.")
@click.option("--cell-size-m", type=float, default=None,
              help="Cell size for the grid baseline (default: patch size).")
@click.option("--separation-report", "separation_path",
              type=click.Path(path_type=Path), default=None,
              help="Also write min/mean inter-set distances to this file.")
@click.pass_context
@_guarded
def split(ctx, patches_path, tiles_path, p, q, grid_baseline, cell_size_m, separation_path):
    """Assign every patch to train, validation or test."""
    config = _resolve(ctx, p=p, q=q)
    out_dir = _out_dir(config)
    tiles = {report.tile_id: extent for extent, report in _load_tiles(tiles_path)}
    patches = _load_patches(patches_path)
    assignments: list[tuple[PatchExtent, SplitTag]] = []
    for patch in patches:
        if grid_baseline:
            tag = assign_split_grid_baseline(patch, cell_size_m or config.patch_size_m)
        else:
            extent = tiles.get(patch.tile_id)
            if extent is None:
                raise DomainError(f"patch {patch.patch_id} names unknown tile {patch.tile_id}")
            geom = SplitGeometry(s=extent.size, p=config.p, q=config.q)
            tag = assign_split(patch, extent, geom)
        assignments.append((patch, tag))
    out_dir.mkdir(parents=True, exist_ok=True)
    splits_path = out_dir / "splits.json"
    splits_path.write_text(json.dumps(
        {patch.patch_id: tag.value for patch, tag in assignments},
        indent=2, sort_keys=True,
    ) + "\n")
    counts = {tag.value: 0 for tag in SplitTag}
    for _patch, tag in assignments:
        counts[tag.value] += 1
    artifacts = {"splits": "splits.json"}
    if separation_path:
        report = separation_stats(assignments)
        separation_path.parent.mkdir(parents=True, exist_ok=True)
        separation_path.write_text(report.to_json(indent=2) + "\n")
        artifacts["separation_report"] = str(separation_path)
    _write_manifest(out_dir, "split", config,
                    {"patches": patches_path, "tiles": tiles_path}, counts, artifacts)
    click.echo(json.dumps(counts))


_BAND_SUFFIXES = tuple(BAND_RESOLUTION_M) + ("reference_map",)


def _scan_band_files(bands_dir: Path) -> dict[str, dict[str, Path]]:
    """Group {patch_id}_{band}.tif files by patch id."""
    groups: dict[str, dict[str, Path]] = {}
    for path in sorted(bands_dir.glob("*.tif")):
        stem = path.stem
        for suffix in _BAND_SUFFIXES:
            if stem.endswith(f"_{suffix}"):
                patch_id = stem[: -(len(suffix) + 1)]
                groups.setdefault(patch_id, {})[suffix] = path
                break
        else:
            log.warning("ignoring %s: no recognizable band suffix", path.name)
    return groups


@main.command()
@click.option("--bands", "bands_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Directory of per-band GeoTIFFs named {patch_id}_{band}.tif.")
@click.option("--reference-maps", "reference_maps_dir",
              type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help="Directory of {patch_id}_reference_map.tif files to bundle"
                   " into each record.")
@click.option("--store", "store_path", type=click.Path(path_type=Path), default=None,
              help="Store file to create (default: <out-dir>/patches.mdb).")
@click.option("--baseline-dir", type=click.Path(path_type=Path), default=None,
              help="Also write one serialized record file per patch here.")
@click.option("--map-size", type=int, default=None)
@click.pass_context
@_guarded
def encode(ctx, bands_dir, reference_maps_dir, store_path, baseline_dir, map_size):
    """Pack per-patch rasters into the key-value tensor store."""
    config = _resolve(ctx, map_size=map_size)
    out_dir = _out_dir(config)
    store_path = store_path or out_dir / "patches.mdb"
    groups = _scan_band_files(bands_dir)
    if not groups:
        raise DomainError(f"no band files found under {bands_dir}")
    if reference_maps_dir is not None:
        for patch_id, files in _scan_band_files(reference_maps_dir).items():
            if patch_id in groups and "reference_map" in files:
                groups[patch_id]["reference_map"] = files["reference_map"]

    def records():
        for patch_id in sorted(groups):
            record = {}
            for band_name, path in sorted(groups[patch_id].items()):
                record[band_name] = read_single_band(path).values
            yield patch_id, record

    out_dir.mkdir(parents=True, exist_ok=True)
    report = None
    with StoreWriter(store_path, map_size=config.map_size) as writer:
        for patch_id, record in records():
            writer.put(patch_id, codec.encode_record(record))
        report = writer.close()
    if baseline_dir:
        export_baseline(records(), baseline_dir)
    counts = {"entries": report.entries, "total_value_bytes": report.total_value_bytes,
              "file_bytes": report.file_bytes}
    artifacts = {"store": str(store_path)}
    if baseline_dir:
        artifacts["baseline_dir"] = str(baseline_dir)
    inputs = {"bands": bands_dir}
    if reference_maps_dir is not None:
        inputs["reference_maps"] = reference_maps_dir
    _write_manifest(out_dir, "encode", config, inputs, counts, artifacts)
    click.echo(json.dumps(counts))


@main.command()
@click.option("--sidecars", "sidecar_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--splits", "splits_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="splits.json mapping patch ids to tags.")
@click.pass_context
@_guarded
def stats(ctx, sidecar_dir, splits_path):
    """Per-class, per-split counts over retained, clean patches."""
    config = _resolve(ctx)
    out_dir = _out_dir(config)
    split_map = json.loads(splits_path.read_text()) if splits_path else {}
    records = []
    skipped = 0
    for path in sorted(sidecar_dir.glob("*.json")):
        doc = read_patch_sidecar(path)
        if doc.get("retention") != RetentionReason.KEPT.value or not doc.get("labels"):
            skipped += 1
            continue
        if doc.get("split") is None and doc["patch_id"] in split_map:
            doc = {**doc, "split": split_map[doc["patch_id"]]}
        records.append(sidecar_stats_record(doc))
    report = dataset_stats(records)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out_dir / "stats.json"
    stats_path.write_text(report.to_json(indent=2) + "\n")
    counts = {"records": len(records), "skipped": skipped,
              **{k: int(v) for k, v in report.to_dict()["split_totals"].items()}}
    inputs = {"sidecars": sidecar_dir}
    if splits_path:
        inputs["splits"] = splits_path
    _write_manifest(out_dir, "stats", config, inputs, counts, {"stats": "stats.json"})
    click.echo(json.dumps(counts))


@main.command()
@click.option("--store", "store_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--baseline-dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("-n", "--lookups", type=int, default=10_000)
@click.pass_context
@_guarded
def bench(ctx, store_path, baseline_dir, lookups):
    """Measure random-read throughput of the store against loose files."""
    config = _resolve(ctx)
    out_dir = _out_dir(config)
    with StoreHandle(store_path, StoreMode.READ_ONLY) as handle:
        report = bench_random_read(handle, baseline_dir, lookups, seed=config.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench_path = out_dir / "bench.json"
    bench_path.write_text(report.to_json(indent=2) + "\n")
    counts = {"lookups": lookups}
    if report.speedup is not None:
        counts["speedup"] = round(report.speedup, 3)
    _write_manifest(out_dir, "bench", config,
                    {"store": store_path, "baseline": baseline_dir}, counts,
                    {"bench": "bench.json"})
    click.echo(report.to_json())


if __name__ == "__main__":
    main()
