"""Multi-modal patch dataset construction and tensor storage toolkit."""

__version__ = "0.1.0"

from .errors import PipelineError
from .geometry import (
    PatchExtent,
    SeparationReport,
    SplitAssignment,
    SplitGeometry,
    SplitTag,
    SquareExtent,
    assign_split,
    assign_split_grid_baseline,
    frame_widths,
    separation_stats,
)
from .labeling import (
    UNLABELED,
    ClassNomenclature,
    LandCoverPolygonSet,
    MultiLabelSet,
    ReferenceMap,
    RetentionDecision,
    RetentionReason,
    coverage_fraction,
    extract_multilabels,
    rasterize_reference_map,
    retention_decision,
)
from .pipeline import (
    BandData,
    DatasetStats,
    Disposition,
    Modality,
    PatchFlags,
    PatchPixels,
    TileQualityReport,
    check_quality,
    dataset_stats,
    modality_channels,
    prepare_model_input,
    screen_patch,
    tile_to_patches,
    upsample_nearest,
)
from .store.bench import BenchmarkReport, bench_random_read, export_baseline
from .store.codec import decode_record, encode_record, records_equal
from .store.lmdb import (
    StoreHandle,
    StoreMode,
    StoreReader,
    StoreWriter,
    WriteReport,
    read_record,
    write_store,
)

__all__ = [
    "__version__",
    "PipelineError",
    "PatchExtent",
    "SeparationReport",
    "SplitAssignment",
    "SplitGeometry",
    "SplitTag",
    "SquareExtent",
    "assign_split",
    "assign_split_grid_baseline",
    "frame_widths",
    "separation_stats",
    "UNLABELED",
    "ClassNomenclature",
    "LandCoverPolygonSet",
    "MultiLabelSet",
    "ReferenceMap",
    "RetentionDecision",
    "RetentionReason",
    "coverage_fraction",
    "extract_multilabels",
    "rasterize_reference_map",
    "retention_decision",
    "BandData",
    "DatasetStats",
    "Disposition",
    "Modality",
    "PatchFlags",
    "PatchPixels",
    "TileQualityReport",
    "check_quality",
    "dataset_stats",
    "modality_channels",
    "prepare_model_input",
    "screen_patch",
    "tile_to_patches",
    "upsample_nearest",
    "BenchmarkReport",
    "bench_random_read",
    "export_baseline",
    "decode_record",
    "encode_record",
    "records_equal",
    "StoreHandle",
    "StoreMode",
    "StoreReader",
    "StoreWriter",
    "WriteReport",
    "read_record",
    "write_store",
]
