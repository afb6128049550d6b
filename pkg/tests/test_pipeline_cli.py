import json

import numpy as np
import pytest

from pipeline_fixture import AREA, END, START, dark_spot_model, write_products
from oilseg.cli import main
from oilseg.data.labels import CATEGORIES
from oilseg.data.raster import Georef, read_grid
from oilseg.inference import extract_slicks
from oilseg.models import build_classifier, save_model
from oilseg.pipeline import (
    LocalDirectorySource, PipelineError, PipelineRequest, RemoteSource, centered_patch, classify_slicks,
    emit_geojson, overlap_fraction, run_pipeline, validate_geojson,
)


@pytest.fixture(scope="module")
def products(tmp_path_factory):
    d = tmp_path_factory.mktemp("products")
    info = write_products(d)
    return d, info


def request(**kw):
    return PipelineRequest(AREA, START, END, **kw)


# GeoJSON ------------------------------------------------------------------


def test_single_pixel_square_feature():
    mask = np.zeros((4, 4), np.uint8)
    mask[1, 2] = 1
    doc = emit_geojson(extract_slicks(mask, mask.astype(float)), Georef(), {"product_id": "x"})
    (f,) = doc["features"]
    ring = f["geometry"]["coordinates"][0]
    assert f["geometry"]["type"] == "Polygon" and len(ring) == 5 and ring[0] == ring[-1]
    assert validate_geojson(doc) == []
    assert set(f["properties"]) == {"product_id", "timestamp", "area_km2", "nn_distance_km", "mean_score"}
    assert f["properties"]["nn_distance_km"] is None


def test_two_pixel_affine_hand_computation():
    mask = np.zeros((3, 3), np.uint8)
    mask[0, 0] = mask[0, 1] = 1
    g = Georef(10.0, 60.0, 0.5, -0.25)
    ring = emit_geojson(extract_slicks(mask, mask.astype(float)), g)["features"][0]["geometry"]["coordinates"][0]
    corners = {(10.0, 60.0), (11.0, 60.0), (11.0, 59.75), (10.0, 59.75)}
    assert {tuple(p) for p in ring} == corners and len(ring) == 5
    signed = sum(a[0] * b[1] - b[0] * a[1] for a, b in zip(ring, ring[1:])) / 2
    assert signed == pytest.approx(0.25)  # counter-clockwise in lon/lat


def test_hole_orientation_and_missing_georef():
    mask = np.zeros((7, 7), np.uint8)
    mask[1:6, 1:6] = 1
    mask[3, 3] = 0
    doc = emit_geojson(extract_slicks(mask, mask.astype(float)), Georef())
    assert len(doc["features"][0]["geometry"]["coordinates"]) == 2
    assert validate_geojson(doc) == []
    with pytest.raises(PipelineError):
        emit_geojson([], None)


def test_validator_rejects_bad_documents():
    ok = {"type": "Feature", "properties": {}, "geometry": {"type": "Polygon",
          "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]]}}
    assert validate_geojson({"type": "FeatureCollection", "features": [ok]}) == []
    cases = [
        {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1]]]},
        {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1]]]},
        {"type": "Polygon", "coordinates": [[[0, 0], [1, 1], [1, 0], [0, 0]]]},
        {"type": "Polygon", "coordinates": [[[0, 0], [200, 0], [1, 1], [0, 0]]]},
        {"type": "Circle", "coordinates": []},
    ]
    for geom in cases:
        assert validate_geojson({"type": "FeatureCollection", "features": [ok | {"geometry": geom}]})
    assert validate_geojson({"type": "FeatureCollection", "features": [], "crs": {}})
    assert validate_geojson([]) and validate_geojson({"type": "FeatureCollection"})


# sources and requests -----------------------------------------------------


def test_request_validation():
    with pytest.raises(PipelineError):
        PipelineRequest(AREA, END, START)
    with pytest.raises(PipelineError):
        request(overlap_min=0.0)
    with pytest.raises(PipelineError):
        PipelineRequest((1, 1, 0, 2), START, END)


def test_overlap_fraction():
    assert overlap_fraction((0, 0, 2, 2), (1, 0, 5, 5)) == pytest.approx(0.5)
    assert overlap_fraction((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_local_source_filters(products):
    d, _ = products
    src = LocalDirectorySource(d)
    assert [p.product_id for p in src.query(AREA, START, END)] == ["P1", "P2", "P3"]
    assert [p.product_id for p in src.query(AREA, "2020-06-11T00:00:00Z", END)] == ["P2", "P3"]
    assert src.query((0, 0, 1, 1), START, END) == []
    with pytest.raises(NotImplementedError):
        RemoteSource().query(AREA, START, END)


# runs ---------------------------------------------------------------------


def test_empty_source(tmp_path):
    doc, report = run_pipeline(request(), LocalDirectorySource(tmp_path), dark_spot_model())
    assert doc == {"type": "FeatureCollection", "features": []} and validate_geojson(doc) == []
    assert report.queried == 0


def test_fixture_counts_and_idempotence(products):
    d, info = products
    doc, report = run_pipeline(request(), LocalDirectorySource(d), dark_spot_model())
    assert len(doc["features"]) == info["expected"] == report.slicks
    assert (report.fetched, report.with_detections, report.failures) == (3, 2, [])
    assert validate_geojson(doc) == []
    again, _ = run_pipeline(request(), LocalDirectorySource(d), dark_spot_model())
    assert json.dumps(doc) == json.dumps(again)
    threaded, _ = run_pipeline(request(workers=3), LocalDirectorySource(d), dark_spot_model())
    assert json.dumps(threaded) == json.dumps(doc)


def test_feature_area_matches_polygon_area(products):
    d, _ = products
    doc, _ = run_pipeline(request(use_tta=False), LocalDirectorySource(d), dark_spot_model())
    pixel_deg2 = (4e-4) ** 2  # 40 m pixels after preprocessing
    for f in doc["features"]:
        rings = f["geometry"]["coordinates"]
        deg2 = sum(abs(sum(a[0] * b[1] - b[0] * a[1] for a, b in zip(r, r[1:])) / 2) * (1 if i == 0 else -1)
                   for i, r in enumerate(rings))
        assert f["properties"]["area_km2"] == pytest.approx(deg2 / pixel_deg2 * 0.0016, rel=0.01)


class FaultySource(LocalDirectorySource):
    def fetch(self, descriptor):
        if descriptor.product_id == "P2":
            raise OSError("simulated transfer failure")
        product = super().fetch(descriptor)
        if descriptor.product_id == "P3":
            product.values = product.values[:3]  # too small to tile
        return product


def test_fault_injection_isolated(products):
    d, _ = products
    doc, report = run_pipeline(request(), FaultySource(d), dark_spot_model())
    assert [f[0] for f in report.failures] == ["P2", "P3"]
    assert report.fetched == 2 and report.with_detections == 1
    assert {f["properties"]["product_id"] for f in doc["features"]} == {"P1"}
    assert validate_geojson(doc) == []


def test_missing_model():
    with pytest.raises(PipelineError):
        run_pipeline(request(), LocalDirectorySource("."))


# classification -----------------------------------------------------------


def test_corner_patch_mirror_padded():
    values = np.arange(100.0).reshape(10, 10)
    p = centered_patch(values, 0, 0, size=8)
    assert p.shape == (8, 8)
    assert p[4, 4] == values[0, 0] and p[4, 5] == values[0, 1] and p[3, 4] == values[1, 0]


def test_classify_slicks_flags_missing(tmp_path):
    mask = np.zeros((40, 40), np.uint8)
    mask[0:3, 0:6] = 1
    slicks = extract_slicks(mask, mask.astype(float))
    save_model(build_classifier(2, seed=0), tmp_path / "linear.oseg")
    (out,) = classify_slicks(slicks, np.random.default_rng(0).random((40, 40)), mask.astype(float),
                             {"linear": str(tmp_path / "linear.oseg"), "patch": str(tmp_path / "nope.oseg")})
    assert set(out.values) == {"linear"} and out.values["linear"] in CATEGORIES["linear"]
    assert "patch" in out.missing and len(out.missing) == len(CATEGORIES) - 1


# CLI ----------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    data, raw = tmp_path / "data", tmp_path / "raw"
    assert main(["--seed", "1", "synth", "--out", str(data), "--n", "6", "--val", "2", "--size", "32"]) == 0
    assert main(["synth", "--out", str(raw), "--products", "2", "--height", "96", "--width", "96",
                 "--slicks", "2"]) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"batch_size": 4, "dropout": 0.0}))
    model = tmp_path / "m.oseg"
    assert main(["--config", str(cfg), "train", "--data", str(data), "--out", str(model),
                 "--width", "8", "--epochs", "1"]) == 0
    assert main(["train2stage", "--data", str(data), "--out", str(tmp_path / "m2.oseg"), "--width", "8",
                 "--stage1", "1", "--stage2", "1", "--batch-size", "4"]) == 0
    assert main(["search", "--data", str(data), "--budget", "1", "--epochs", "1", "--width", "8",
                 "--batch-size", "4", "--log", str(tmp_path / "t.jsonl")]) == 0
    assert main(["eval", "--out", str(tmp_path / "ev"), "--model", str(model), "--data", str(data)]) == 0
    assert (tmp_path / "ev" / "summary.json").exists()
    assert main(["classify-train", "--data", str(data), "--category", "linear", "--out",
                 str(tmp_path / "c.oseg"), "--epochs", "1", "--batch-size", "4"]) == 0
    prep = tmp_path / "prep"
    assert main(["prepare", "--raw", str(raw), "--out", str(prep), "--size", "32"]) == 0
    soft = tmp_path / "soft.g16r"
    assert main(["infer", "--model", str(model), "--product", str(raw / "S000.g16r"), "--out-soft", str(soft),
                 "--out-mask", str(tmp_path / "mask.g16r"), "--window", "32", "--no-tta", "--filter"]) == 0
    assert read_grid(soft).shape == (96, 96)
    assert main(["eval", "--out", str(tmp_path / "ev2"), "--soft", str(soft), "--truth", str(raw / "S000.mask")]) == 0
    png = tmp_path / "o.png"
    assert main(["viz-export", "--product", str(raw / "S000.g16r"), "--soft", str(soft), "--out-png", str(png),
                 "--geojson", str(tmp_path / "o.geojson")]) == 0
    assert png.stat().st_size > 0
    assert validate_geojson(json.loads((tmp_path / "o.geojson").read_text())) == []
    req = tmp_path / "req.json"
    req.write_text(json.dumps({"area": [9, 59, 12, 61], "start": START, "end": END, "model_path": str(model),
                               "window": 32, "use_tta": False}))
    out = tmp_path / "run.geojson"
    assert main(["--config", str(req), "--bit-exact", "pipeline", "--source", str(raw), "--out", str(out),
                 "--report", str(tmp_path / "report.json")]) == 0
    assert validate_geojson(json.loads(out.read_text())) == []
    assert json.loads((tmp_path / "report.json").read_text())["queried"] == 2
    capsys.readouterr()


def test_cli_rejects_unknown_config_field(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rat": 0.1}))
    with pytest.raises(SystemExit):
        main(["--config", str(cfg), "train", "--data", str(tmp_path), "--out", str(tmp_path / "m")])
