import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oilseg.data.augment import AugmentConfig, apply_transform, augment
from oilseg.data.labels import CATEGORIES, CategoryLabel, LabelError, value_index
from oilseg.data.patches import (
    PatchError, Sample, backscatter_histogram, central_origin, extract_patches, grid_origins, load_manifest,
    oil_fraction, save_samples, split_by_event,
)
from oilseg.data.preprocess import boxcar, clip_scale, downsample_mask, preprocess_product
from oilseg.data.raster import (
    Georef, RasterError, RasterMeta, RasterProduct, load_raster, meta_path, read_grid, save_raster, write_grid,
)
from oilseg.data.synth import (
    FAMILIES, PlantedSlick, SynthConfig, eccentricity, slick_mask, synthesize_dataset, synthesize_product,
)


# rasters ------------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.uint16, np.float32, np.uint8])
def test_grid_round_trip(tmp_path, dtype):
    a = (np.random.default_rng(0).random((7, 5)) * 200).astype(dtype)
    write_grid(a, tmp_path / "g")
    b = read_grid(tmp_path / "g", dtype)
    assert b.dtype == a.dtype and b.tobytes() == a.tobytes()


def test_grid_errors(tmp_path):
    write_grid(np.zeros((3, 3), np.uint16), tmp_path / "g")
    data = (tmp_path / "g").read_bytes()
    (tmp_path / "t").write_bytes(data[:-1])
    with pytest.raises(RasterError, match="truncated"):
        read_grid(tmp_path / "t")
    (tmp_path / "m").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(RasterError, match="magic"):
        read_grid(tmp_path / "m")
    with pytest.raises(RasterError, match="dtype"):
        read_grid(tmp_path / "g", np.float32)
    with pytest.raises(RasterError):
        write_grid(np.zeros((2, 2), np.int64), tmp_path / "x")


def test_raster_sidecar(tmp_path):
    p = RasterProduct(np.ones((4, 6), np.uint16), RasterMeta("P1", "2020-01-01T00:00:00Z", 10.0, 31, 44, Georef(1, 2, 0.1, -0.1)))
    save_raster(p, tmp_path / "p.g16r")
    q = load_raster(tmp_path / "p.g16r")
    assert q.meta == p.meta and np.array_equal(q.values, p.values)
    assert q.incidence_angles()[0] == 31 and q.incidence_angles()[-1] == 44
    meta_path(tmp_path / "p.g16r").unlink()
    with pytest.raises(RasterError, match="sidecar"):
        load_raster(tmp_path / "p.g16r")


def test_incidence_angle_range_enforced():
    with pytest.raises(RasterError):
        RasterMeta(incidence_near=20.0).validate()


def test_georef_corners():
    g = Georef(10.0, 60.0, 0.001, -0.0005)
    lon, lat = g.to_lonlat([0, 2], [0, 3])
    assert lon.tolist() == pytest.approx([10.0, 10.003]) and lat.tolist() == pytest.approx([60.0, 59.999])
    assert g.footprint(2, 3) == pytest.approx((10.0, 59.999, 10.003, 60.0))
    assert g.scaled(4).lon_spacing == pytest.approx(0.004)


# preprocessing ------------------------------------------------------------


def test_preprocess_constant_product():
    raw = RasterProduct(np.full((40, 48), 75, np.uint16), RasterMeta(pixel_size_m=10.0))
    out = preprocess_product(raw)
    assert out.values.shape == (10, 12)
    assert np.allclose(out.values, 0.5)
    assert out.meta.pixel_size_m == 40.0
    assert out.meta.georef.lon_spacing == pytest.approx(4 * raw.meta.georef.lon_spacing)


def test_preprocess_rules():
    assert clip_scale(np.array([0.0, 150.0, 600.0])).tolist() == [0.0, 1.0, 1.0]
    with pytest.raises(RasterError):
        boxcar(np.zeros((5, 20)))
    with pytest.raises(RasterError, match="10 m"):
        preprocess_product(RasterProduct(np.zeros((40, 40), np.uint16), RasterMeta(pixel_size_m=40.0)))
    v = np.zeros((11, 11))
    v[5, 5] = 121.0
    assert boxcar(v)[5, 5] == pytest.approx(1.0)


def test_downsample_mask_majority():
    m = np.zeros((8, 8), np.uint8)
    m[:4, :4] = 1
    m[4:6, 4:8] = 1  # exactly half of that block
    m[0, 4] = 1
    assert downsample_mask(m).tolist() == [[1, 0], [0, 1]]
    assert downsample_mask(np.ones((5, 5), np.uint8)).shape == (2, 2)


# labels -------------------------------------------------------------------


def test_category_schema():
    assert len(CATEGORIES) == 12
    assert sum(len(v) == 2 for v in CATEGORIES.values()) == 9
    lab = CategoryLabel(linear=True, texture="rough")
    assert lab.value("linear") == "true" and lab.index("linear") == 1
    assert lab.index("texture") == 0
    assert CategoryLabel.from_dict(lab.to_dict()) == lab
    with pytest.raises(LabelError):
        CategoryLabel(edge="blurry")
    with pytest.raises(LabelError):
        value_index("texture", "bumpy")
    assert value_index("patch", True) == 1 and value_index("contrast", 2) == 2
    with pytest.raises(LabelError):
        value_index("contrast", 3)


# patches ------------------------------------------------------------------


def _product_with_events(shape=(480, 480)):
    values = np.random.default_rng(0).random(shape).astype(np.float32)
    mask = np.zeros(shape, np.uint8)
    events = np.zeros(shape, np.int32)
    mask[100:130, 100:130] = 1
    events[100:130, 100:130] = 1
    mask[150:170, 300:330] = 1  # second event straddles a grid line
    events[150:170, 300:330] = 2
    prod = RasterProduct(values, RasterMeta(pixel_size_m=40.0))
    return prod, mask, events


def test_extract_patches_d1_d2():
    prod, mask, events = _product_with_events()
    labels = {1: CategoryLabel(patch=True), 2: CategoryLabel(linear=True)}
    d1, d2 = extract_patches(prod, mask, events, labels, rng=0)
    assert [s.event_id for s in d1] == [1, 2]
    assert d1[0].origin == (0, 0) and d1[0].categories.patch
    oil = [s for s in d2 if s.oil_pixels > 0]
    empty = [s for s in d2 if s.oil_pixels == 0]
    assert len(empty) == len(oil)
    assert all(s.vv.shape == (160, 160) for s in d2)
    assert len({s.origin for s in d2}) == len(d2)
    assert all(any(s is t for t in d2) for s in d1)


def test_central_origin_tie_break():
    ev = np.zeros((320, 320), bool)
    ev[159:161, 159:161] = True  # centred on a grid corner: four equal candidates
    assert central_origin(ev, grid_origins(320, 320), 160) == (0, 0)


def test_extract_patches_errors():
    prod, mask, events = _product_with_events((100, 100))
    with pytest.raises(PatchError):
        extract_patches(prod, mask, events)
    prod, mask, events = _product_with_events()
    with pytest.raises(PatchError):
        extract_patches(prod, mask[:10], events)
    with pytest.raises(PatchError, match="empty"):
        extract_patches(prod, mask, events, {3: CategoryLabel()})


@given(st.integers(0, 1000))
def test_split_by_event_no_leakage(seed):
    samples = [Sample(np.zeros((2, 2)), np.zeros((2, 2)), event_id=i % 7) for i in range(30)]
    samples += [Sample(np.zeros((2, 2)), np.zeros((2, 2))) for _ in range(5)]
    splits = split_by_event(samples, {"train": 0.7, "val": 0.15, "test": 0.15}, seed)
    assert sum(len(v) for v in splits.values()) == 35
    seen = {}
    for name, ss in splits.items():
        for s in ss:
            if s.event_id is not None:
                assert seen.setdefault(s.event_id, name) == name


def test_histogram_modes_and_fraction():
    vv = np.full((10, 10), 0.6, np.float32)
    mask = np.zeros((10, 10), np.uint8)
    vv[:2] = 0.1
    mask[:2] = 1
    h = backscatter_histogram([Sample(vv, mask)])
    assert h.mode("oil") == pytest.approx(12.5 + 2.5, abs=2.5)
    assert h.mode("sea") == pytest.approx(90.0, abs=2.5)
    assert abs(h.oil.sum() - 1) < 1e-12 and not h.oil_empty
    assert oil_fraction([Sample(vv, mask)]) == pytest.approx(0.2)
    assert backscatter_histogram([Sample(vv, np.zeros_like(mask))]).oil_empty


def test_manifest_round_trip(tmp_path):
    samples = synthesize_dataset(SynthConfig(4, size=32), 0)
    save_samples({"train": samples[:3], "val": samples[3:]}, tmp_path)
    back = load_manifest(tmp_path, "train")
    assert len(back) == 3
    assert np.array_equal(back[0].vv, samples[0].vv) and np.array_equal(back[0].mask, samples[0].mask)
    assert back[0].categories == samples[0].categories
    assert json.loads((tmp_path / "manifest.json").read_text())["samples"][3]["split"] == "val"


# augmentation -------------------------------------------------------------


def test_identity_augmentation():
    s = synthesize_dataset(SynthConfig(1, size=32), 0)[0]
    out = augment(s, AugmentConfig.none(), 0)
    assert np.array_equal(out.vv, s.vv) and out.vv is not s.vv


@given(st.integers(0, 10_000))
def test_augmented_mask_stays_binary(seed):
    s = synthesize_dataset(SynthConfig(1, size=32), 0)[0]
    out = augment(s, AugmentConfig(), seed)
    assert out.vv.shape == s.vv.shape and set(np.unique(out.mask)) <= {0, 1}


def test_flip_moves_image_and_mask_together():
    img = np.arange(12.0).reshape(3, 4)
    mask = (img > 5).astype(np.uint8)
    i2, m2 = apply_transform(img, mask, np.eye(2), np.zeros(2), True, False)
    assert np.array_equal(i2, img[:, ::-1]) and np.array_equal(m2, mask[:, ::-1])
    with pytest.raises(ValueError):
        AugmentConfig(pad_mode="wrap")


# synthesis ----------------------------------------------------------------


def test_family_shapes_are_distinguishable():
    rng = np.random.default_rng(0)
    for _ in range(20):
        lin = slick_mask("linear", (160, 160), (80, 80), rng)
        patch = slick_mask("patch", (160, 160), (80, 80), rng)
        assert eccentricity(lin) > 0.99 > eccentricity(patch)
    with pytest.raises(ValueError):
        slick_mask("spiral", (10, 10), (5, 5), rng)


def test_synth_dataset_labels_follow_family():
    samples = synthesize_dataset(SynthConfig(40, size=64), 3)
    for s in samples:
        fam = s.extra["family"]
        assert fam in FAMILIES and s.categories.value(fam) == "true"
        assert s.oil_pixels > 0 and 0 <= s.vv.min() and s.vv.max() <= 1
        assert s.vv[s.mask > 0].mean() < s.vv[s.mask == 0].mean()
    empty = synthesize_dataset(SynthConfig(5, size=32, slick_prob=0.0), 0)
    assert all(s.oil_pixels == 0 and s.categories is None for s in empty)
    with pytest.raises(ValueError):
        SynthConfig(families=("blob",))


def test_synth_product_layout():
    p = synthesize_product(40, 60, [PlantedSlick(20, 20, 5, "disk"), PlantedSlick(20, 45, 4, "disk")], 0)
    assert p.raw.values.shape == (160, 240) and p.raw.values.dtype == np.uint16
    assert p.mask.shape == (40, 60) and set(np.unique(p.event_map)) == {0, 1, 2}
    out = preprocess_product(p.raw)
    assert out.values.shape == p.mask.shape
    assert out.values[p.mask > 0].mean() < 0.5 * out.values[p.mask == 0].mean()
