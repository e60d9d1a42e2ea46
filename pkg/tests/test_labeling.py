import json
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst
from shapely.geometry import box, mapping

from reben_pipeline.errors import (
    CrsMismatchError,
    DomainError,
    GridAlignmentError,
    NoLabeledPixelsError,
)
from reben_pipeline.geometry import PatchExtent
from reben_pipeline.labeling import (
    DEFAULT_CLASS_NAMES,
    N_CLASSES,
    UNLABELED,
    ClassNomenclature,
    LandCoverPolygonSet,
    MultiLabelSet,
    OverlapWarning,
    ReferenceMap,
    RetentionReason,
    coverage_fraction,
    extract_multilabels,
    rasterize_reference_map,
    retention_decision,
)

PASTURES = DEFAULT_CLASS_NAMES.index("Pastures")
URBAN_FABRIC = DEFAULT_CLASS_NAMES.index("Urban fabric")


def make_map(values) -> ReferenceMap:
    return ReferenceMap(np.asarray(values, dtype=np.uint16))


def brute_force_labels(reference_map: ReferenceMap, min_fraction=0) -> tuple[int, ...]:
    """Oracle: per-class pixel scan with exact rational comparison."""
    v = reference_map.values
    labeled = int((v != UNLABELED).sum())
    out = []
    for c in range(N_CLASSES):
        count = int((v == c).sum())
        if Fraction(count, labeled) > Fraction(min_fraction):
            out.append(c)
    return tuple(out)


def patch_1200() -> PatchExtent:
    return PatchExtent("S2A_T32UNE", 3, 4, 0.0, 0.0, 1200.0, "EPSG:32632")


@pytest.fixture(scope="module")
def nomenclature() -> ClassNomenclature:
    return ClassNomenclature.default()


class TestNomenclature:
    def test_default_table_covers_all_classes(self, nomenclature):
        mapped = {i for i in nomenclature.mapping.values() if i is not None}
        assert mapped == set(range(N_CLASSES))
        assert len(nomenclature.codes) == 44

    def test_known_codes(self, nomenclature):
        assert nomenclature.class_index("231") == PASTURES
        assert nomenclature.class_index("111") == URBAN_FABRIC
        assert nomenclature.class_index("122") is None  # explicitly dropped
        assert nomenclature.class_index("999") is None  # unknown

    def test_custom_table_from_csv(self, tmp_path):
        path = tmp_path / "nom.csv"
        rows = ["code,class_index"] + [f"{100 + i},{i}" for i in range(N_CLASSES)]
        rows.append("900,-")
        path.write_text("\n".join(rows) + "\n")
        nom = ClassNomenclature.from_csv(path)
        assert nom.class_index("100") == 0
        assert nom.class_index("900") is None

    def test_incomplete_table_rejected(self, tmp_path):
        path = tmp_path / "nom.csv"
        path.write_text("111,0\n112,1\n")
        with pytest.raises(DomainError):
            ClassNomenclature.from_csv(path)

    def test_wrong_name_count_rejected(self):
        with pytest.raises(DomainError):
            ClassNomenclature({str(100 + i): i for i in range(N_CLASSES)}, ("a", "b"))


class TestRasterize:
    def test_single_polygon_full_cover(self, nomenclature):
        polys = LandCoverPolygonSet(((box(0, 0, 1200, 1200), "231"),), "EPSG:32632")
        ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert ref.values.shape == (120, 120)
        assert (ref.values == PASTURES).all()
        assert coverage_fraction(ref) == 1

    def test_no_polygons_all_unlabeled(self, nomenclature):
        polys = LandCoverPolygonSet((), "EPSG:32632")
        ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert (ref.values == UNLABELED).all()
        assert coverage_fraction(ref) == 0

    def test_two_half_rectangles(self, nomenclature):
        polys = LandCoverPolygonSet(
            (
                (box(0, 0, 600, 1200), "231"),  # pastures, west half
                (box(600, 0, 1200, 1200), "111"),  # urban fabric, east half
            ),
            "EPSG:32632",
        )
        ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert (ref.values[:, :60] == PASTURES).all()
        assert (ref.values[:, 60:] == URBAN_FABRIC).all()
        labels = extract_multilabels(ref)
        assert labels.class_indices() == (PASTURES, URBAN_FABRIC)
        assert labels.class_names() == ("Pastures", "Urban fabric")

    def test_unmapped_codes_leave_pixels_unlabeled(self, nomenclature):
        polys = LandCoverPolygonSet(
            ((box(0, 0, 1200, 1200), "122"), (box(0, 0, 600, 1200), "999")),
            "EPSG:32632",
        )
        with pytest.warns(OverlapWarning):
            ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert (ref.values == UNLABELED).all()

    def test_later_polygon_wins_with_warning(self, nomenclature):
        polys = LandCoverPolygonSet(
            ((box(0, 0, 1200, 1200), "231"), (box(0, 0, 1200, 1200), "111")),
            "EPSG:32632",
        )
        with pytest.warns(OverlapWarning):
            ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert (ref.values == URBAN_FABRIC).all()

    def test_crs_mismatch_rejected(self, nomenclature):
        polys = LandCoverPolygonSet(((box(0, 0, 10, 10), "231"),), "EPSG:3035")
        with pytest.raises(CrsMismatchError):
            rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)

    def test_non_integer_grid_rejected(self, nomenclature):
        polys = LandCoverPolygonSet((), "EPSG:32632")
        with pytest.raises(GridAlignmentError):
            rasterize_reference_map(polys, patch_1200(), 7.0, nomenclature)

    def test_row_zero_is_northernmost(self, nomenclature):
        # polygon over the top (north) quarter only
        polys = LandCoverPolygonSet(((box(0, 900, 1200, 1200), "231"),), "EPSG:32632")
        ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        assert (ref.values[:30] == PASTURES).all()
        assert (ref.values[30:] == UNLABELED).all()

    def test_downscaled_majority_agrees_on_uniform_blocks(self, nomenclature):
        # rectangles snapped to the 20 m grid so most blocks are class-uniform
        rng = np.random.default_rng(7)
        rects = []
        for code in ("231", "111", "312", "511"):
            x0, y0 = rng.integers(0, 50, 2) * 20
            w, h = rng.integers(1, 25, 2) * 20
            rects.append((box(x0, y0, min(1200, x0 + w), min(1200, y0 + h)), code))
        polys = LandCoverPolygonSet(tuple(rects), "EPSG:32632")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OverlapWarning)
            fine = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature).values
            coarse = rasterize_reference_map(polys, patch_1200(), 20.0, nomenclature).values
        blocks = fine.reshape(60, 2, 60, 2).transpose(0, 2, 1, 3).reshape(60, 60, 4)
        uniform = (blocks == blocks[..., :1]).all(axis=-1)
        assert uniform.any()
        assert (coarse[uniform] == blocks[..., 0][uniform]).all()

    def test_nomenclature_totality_property(self, nomenclature):
        rng = np.random.default_rng(11)
        rects = []
        for _ in range(12):
            code = f"{rng.integers(100, 999)}"
            x0, y0 = rng.uniform(0, 1100, 2)
            rects.append((box(x0, y0, x0 + rng.uniform(10, 600), y0 + rng.uniform(10, 600)), code))
        polys = LandCoverPolygonSet(tuple(rects), "EPSG:32632")
        with pytest.warns(OverlapWarning):
            ref = rasterize_reference_map(polys, patch_1200(), 10.0, nomenclature)
        labeled = ref.values[ref.values != UNLABELED]
        assert labeled.size == 0 or labeled.max() < N_CLASSES


class TestGeoJson:
    def doc(self, crs):
        feature = {
            "type": "Feature",
            "geometry": mapping(box(0, 0, 600, 1200)),
            "properties": {"CODE_18": "231"},
        }
        out = {"type": "FeatureCollection", "features": [feature]}
        if crs is not None:
            out["crs"] = crs
        return out

    def test_plain_string_crs(self):
        polys = LandCoverPolygonSet.from_geojson(self.doc("EPSG:32632"))
        assert polys.crs == "EPSG:32632"
        assert polys.polygons[0][1] == "231"

    def test_legacy_named_crs(self):
        crs = {"type": "name", "properties": {"name": "EPSG:3035"}}
        assert LandCoverPolygonSet.from_geojson(self.doc(crs)).crs == "EPSG:3035"

    def test_missing_code_property_rejected(self):
        doc = self.doc(None)
        del doc["features"][0]["properties"]["CODE_18"]
        with pytest.raises(DomainError):
            LandCoverPolygonSet.from_geojson(doc)

    def test_directory_loader_merges_files(self, tmp_path):
        (tmp_path / "a.geojson").write_text(json.dumps(self.doc("EPSG:32632")))
        (tmp_path / "b.geojson").write_text(json.dumps(self.doc("EPSG:32632")))
        polys = LandCoverPolygonSet.from_geojson_dir(tmp_path)
        assert len(polys.polygons) == 2

    def test_directory_loader_rejects_mixed_crs(self, tmp_path):
        (tmp_path / "a.geojson").write_text(json.dumps(self.doc("EPSG:32632")))
        (tmp_path / "b.geojson").write_text(json.dumps(self.doc("EPSG:3035")))
        with pytest.raises(CrsMismatchError):
            LandCoverPolygonSet.from_geojson_dir(tmp_path)

    def test_invalid_geometry_normalized(self):
        bowtie = {
            "type": "Polygon",
            "coordinates": [[[0, 0], [2, 2], [2, 0], [0, 2], [0, 0]]],
        }
        doc = {
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "geometry": bowtie, "properties": {"CODE_18": "231"}}
            ],
        }
        polys = LandCoverPolygonSet.from_geojson(doc)
        polys.validate()


class TestCoverageAndRetention:
    def test_exact_three_quarters_boundary(self):
        values = np.full(14400, UNLABELED, dtype=np.uint16)
        values[:10800] = 3
        ref = make_map(values.reshape(120, 120))
        assert coverage_fraction(ref) == Fraction(3, 4)
        decision = retention_decision(ref)
        assert decision.keep and decision.reason is RetentionReason.KEPT

    def test_one_pixel_below_boundary_dropped(self):
        values = np.full(14400, UNLABELED, dtype=np.uint16)
        values[:10799] = 3
        ref = make_map(values.reshape(120, 120))
        assert coverage_fraction(ref) == Fraction(10799, 14400)
        decision = retention_decision(ref)
        assert not decision.keep
        assert decision.reason is RetentionReason.LOW_COVERAGE

    def test_all_unlabeled_dropped_as_no_labels(self):
        ref = make_map(np.full((120, 120), UNLABELED, dtype=np.uint16))
        decision = retention_decision(ref)
        assert not decision.keep
        assert decision.reason is RetentionReason.NO_LABELS
        assert decision.coverage == 0

    def test_fully_labeled(self):
        ref = make_map(np.zeros((4, 4), dtype=np.uint16))
        assert coverage_fraction(ref) == 1
        assert retention_decision(ref).keep

    @given(t1=st.fractions(0, 1), t2=st.fractions(0, 1))
    def test_threshold_monotonicity(self, t1, t2):
        values = np.full((10, 10), UNLABELED, dtype=np.uint16)
        values[:7] = 1
        ref = make_map(values)
        lo, hi = sorted([t1, t2])
        if lo == 0:
            return
        if retention_decision(ref, hi).keep:
            assert retention_decision(ref, lo).keep

    def test_bad_threshold_rejected(self):
        ref = make_map(np.zeros((2, 2), dtype=np.uint16))
        for bad in (0, -1, 2):
            with pytest.raises(DomainError):
                retention_decision(ref, bad)


class TestMultiLabels:
    def test_single_class_full_cover(self):
        ref = make_map(np.full((8, 8), 5, dtype=np.uint16))
        labels = extract_multilabels(ref)
        assert labels.class_indices() == (5,)
        assert len(labels) == 1

    def test_minority_pixel_respects_min_fraction(self):
        values = np.zeros(14400, dtype=np.uint16)
        values[0] = 1
        ref = make_map(values.reshape(120, 120))
        assert extract_multilabels(ref, 0).class_indices() == (0, 1)
        assert extract_multilabels(ref, 0.001).class_indices() == (0,)

    def test_empty_map_rejected(self):
        ref = make_map(np.full((4, 4), UNLABELED, dtype=np.uint16))
        with pytest.raises(NoLabeledPixelsError):
            extract_multilabels(ref)

    def test_bad_min_fraction_rejected(self):
        ref = make_map(np.zeros((2, 2), dtype=np.uint16))
        with pytest.raises(DomainError):
            extract_multilabels(ref, 1)

    def test_from_indices_round_trip(self):
        labels = MultiLabelSet.from_indices([2, 17])
        assert labels.class_indices() == (2, 17)
        with pytest.raises(DomainError):
            MultiLabelSet.from_indices([19])

    @given(
        values=npst.arrays(
            np.uint16,
            npst.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=24),
            elements=st.sampled_from(list(range(N_CLASSES)) + [UNLABELED] * 5),
        )
    )
    def test_matches_brute_force_scan(self, values):
        ref = make_map(values)
        if ref.labeled_pixel_count == 0:
            with pytest.raises(NoLabeledPixelsError):
                extract_multilabels(ref)
            return
        assert extract_multilabels(ref).class_indices() == brute_force_labels(ref)

    @given(
        values=npst.arrays(
            np.uint16,
            npst.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=24),
            elements=st.sampled_from(list(range(N_CLASSES)) + [UNLABELED] * 3),
        )
    )
    def test_pixel_conservation(self, values):
        ref = make_map(values)
        counts = ref.class_counts()
        assert counts.sum() + (ref.values == UNLABELED).sum() == ref.pixel_count
