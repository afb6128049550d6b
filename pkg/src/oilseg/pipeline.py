"""Batch detection over SAR products: query, preprocess, predict, vectorise,
optionally classify, and emit GeoJSON."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .data.labels import CATEGORIES
from .data.preprocess import preprocess_product
from .data.raster import Georef, RasterProduct, load_raster, meta_path
from .graph import INFERENCE, Graph, GraphError, execute_graph
from .inference import Slick, extract_slicks, filter_color, predict_tiled, prune_slicks
from .models import load_model

log = logging.getLogger(__name__)

PATCH = 160


class PipelineError(ValueError):
    pass


def parse_time(value) -> datetime:
    if isinstance(value, datetime):
        return value
    return datetime.fromisoformat(str(value).replace("Z", "+00:00"))


@dataclass
class PipelineRequest:
    area: tuple[float, float, float, float]  # lon_min, lat_min, lon_max, lat_max
    start: str
    end: str
    model_path: str | None = None
    overlap_min: float = 0.20
    tau_filter: float = 0.8
    tau_color: float = 0.5
    min_area_km2: float = 0.25
    max_isolation_km: float = 1.5
    window: int = 160
    use_tta: bool = True
    classify: bool = False
    category_models: dict[str, str] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        self.area = tuple(float(v) for v in self.area)
        if len(self.area) != 4 or self.area[0] >= self.area[2] or self.area[1] >= self.area[3]:
            raise PipelineError("area must be (lon_min, lat_min, lon_max, lat_max) with min < max")
        if parse_time(self.start) >= parse_time(self.end):
            raise PipelineError("start must precede end")
        if not 0.0 < self.overlap_min <= 1.0:
            raise PipelineError("overlap_min must lie in (0, 1]")
        if self.tau_filter < self.tau_color:
            raise PipelineError("tau_filter must be >= tau_color")
        if self.workers < 1:
            raise PipelineError("workers must be >= 1")


# sources ------------------------------------------------------------------


@dataclass
class ProductDescriptor:
    product_id: str
    timestamp: str
    footprint: tuple[float, float, float, float]
    location: str


class ProductSource(Protocol):
    def query(self, area, start, end, overlap_min: float) -> list[ProductDescriptor]: ...

    def fetch(self, descriptor: ProductDescriptor) -> RasterProduct: ...


def overlap_fraction(footprint, area) -> float:
    """Share of the product footprint inside ``area`` (lon/lat rectangles)."""
    w = min(footprint[2], area[2]) - max(footprint[0], area[0])
    h = min(footprint[3], area[3]) - max(footprint[1], area[1])
    total = (footprint[2] - footprint[0]) * (footprint[3] - footprint[1])
    if w <= 0 or h <= 0 or total <= 0:
        return 0.0
    return w * h / total


class LocalDirectorySource:
    """Raw products stored as G16R grids with JSON sidecars in one directory."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _scan(self) -> list[ProductDescriptor]:
        out = []
        for path in sorted(self.directory.glob("*.g16r")):
            side = meta_path(path)
            if not side.exists():
                log.warning("skipping %s: no metadata sidecar", path)
                continue
            meta = json.loads(side.read_text())
            g = Georef(**meta.get("georef", {}))
            with path.open("rb") as fh:
                head = fh.read(12)
            width, height = np.frombuffer(head[4:12], dtype="<u4")
            out.append(ProductDescriptor(meta["product_id"], meta["timestamp"],
                                         g.footprint(int(height), int(width)), str(path)))
        return out

    def query(self, area, start, end, overlap_min: float = 0.2) -> list[ProductDescriptor]:
        t0, t1 = parse_time(start), parse_time(end)
        hits = [d for d in self._scan()
                if t0 <= parse_time(d.timestamp) <= t1 and overlap_fraction(d.footprint, area) >= overlap_min]
        return sorted(hits, key=lambda d: d.product_id)

    def fetch(self, descriptor: ProductDescriptor) -> RasterProduct:
        return load_raster(descriptor.location)


class RemoteSource:
    """Placeholder for an archive client; plug a real implementation in here."""

    def __init__(self, endpoint: str = ""):
        self.endpoint = endpoint

    def query(self, area, start, end, overlap_min: float = 0.2) -> list[ProductDescriptor]:
        raise NotImplementedError("remote archive access is not bundled; use LocalDirectorySource")

    def fetch(self, descriptor: ProductDescriptor) -> RasterProduct:
        raise NotImplementedError("remote archive access is not bundled; use LocalDirectorySource")


# GeoJSON ------------------------------------------------------------------


def _signed_area(ring) -> float:
    x = np.array([p[0] for p in ring])
    y = np.array([p[1] for p in ring])
    return float(0.5 * np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _orient(ring, ccw: bool) -> list:
    return ring if (_signed_area(ring) > 0) == ccw else ring[::-1]


def slick_geometry(slick: Slick, georef: Georef) -> dict:
    polys = []
    for poly in slick.polygons:
        rings = []
        for i, ring in enumerate(poly):
            lon, lat = georef.to_lonlat([p[1] for p in ring], [p[0] for p in ring])
            coords = [[float(a), float(b)] for a, b in zip(lon, lat)]
            rings.append(_orient(coords, ccw=(i == 0)))
        polys.append(rings)
    if len(polys) == 1:
        return {"type": "Polygon", "coordinates": polys[0]}
    return {"type": "MultiPolygon", "coordinates": polys}


def emit_geojson(slicks: list[Slick], georef: Georef | None, metadata: dict | None = None,
                 categories: list[dict] | None = None) -> dict:
    """RFC 7946 FeatureCollection with one feature per slick."""
    if georef is None:
        raise PipelineError("georeference required to emit GeoJSON")
    metadata = metadata or {}
    features = []
    for i, s in enumerate(slicks):
        props = {
            "product_id": metadata.get("product_id"),
            "timestamp": metadata.get("timestamp"),
            "area_km2": s.area_km2,
            "nn_distance_km": s.nn_distance_km if math.isfinite(s.nn_distance_km) else None,
            "mean_score": s.mean_score,
        }
        if categories is not None:
            props["categories"] = categories[i]
        features.append({"type": "Feature", "geometry": slick_geometry(s, georef), "properties": props})
    return {"type": "FeatureCollection", "features": features}


def _check_position(pos, where, errors):
    if not isinstance(pos, list) or len(pos) not in (2, 3) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in pos
    ):
        errors.append(f"{where}: invalid position {pos!r}")
        return
    if not -180 <= pos[0] <= 180 or not -90 <= pos[1] <= 90:
        errors.append(f"{where}: position {pos!r} out of lon/lat range")


def _check_polygon(coords, where, errors):
    if not isinstance(coords, list) or not coords:
        errors.append(f"{where}: polygon needs at least one ring")
        return
    for i, ring in enumerate(coords):
        w = f"{where} ring {i}"
        if not isinstance(ring, list) or len(ring) < 4:
            errors.append(f"{w}: a linear ring needs >= 4 positions")
            continue
        for p in ring:
            _check_position(p, w, errors)
        if ring[0] != ring[-1]:
            errors.append(f"{w}: ring is not closed")
            continue
        area = _signed_area(ring)
        if i == 0 and area <= 0:
            errors.append(f"{w}: exterior ring must be counter-clockwise")
        if i > 0 and area >= 0:
            errors.append(f"{w}: hole must be clockwise")


def validate_geojson(doc) -> list[str]:
    """Structural RFC 7946 check of a FeatureCollection; returns the list of problems."""
    errors: list[str] = []
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        return ["document is not a FeatureCollection"]
    if "crs" in doc:
        errors.append("'crs' member is not part of RFC 7946")
    feats = doc.get("features")
    if not isinstance(feats, list):
        return errors + ["'features' must be an array"]
    for n, f in enumerate(feats):
        where = f"feature {n}"
        if not isinstance(f, dict) or f.get("type") != "Feature":
            errors.append(f"{where}: not a Feature")
            continue
        if "properties" not in f or not (f["properties"] is None or isinstance(f["properties"], dict)):
            errors.append(f"{where}: properties must be an object or null")
        g = f.get("geometry")
        if g is None:
            continue
        if not isinstance(g, dict):
            errors.append(f"{where}: geometry must be an object")
        elif g.get("type") == "Polygon":
            _check_polygon(g.get("coordinates"), where, errors)
        elif g.get("type") == "MultiPolygon":
            polys = g.get("coordinates")
            if not isinstance(polys, list) or not polys:
                errors.append(f"{where}: MultiPolygon needs polygons")
            else:
                for i, p in enumerate(polys):
                    _check_polygon(p, f"{where} polygon {i}", errors)
        else:
            errors.append(f"{where}: unsupported geometry type {g.get('type')!r}")
    return errors


# classification -----------------------------------------------------------


def centered_patch(values: np.ndarray, row: float, col: float, size: int = PATCH) -> np.ndarray:
    """``size`` x ``size`` window centred on (row, col), mirror-padded at borders."""
    half = size // 2
    padded = np.pad(values, half, mode="reflect")
    r, c = int(round(row)), int(round(col))
    return padded[r : r + size, c : c + size]


@dataclass
class SlickClassification:
    values: dict[str, str]
    missing: list[str]


def classify_slicks(slicks: list[Slick], values: np.ndarray, soft: np.ndarray,
                    models: dict[str, Graph | str | None]) -> list[SlickClassification]:
    """Per-slick category predictions from (VV, soft mask) patches."""
    loaded: dict[str, Graph] = {}
    missing = []
    for cat in CATEGORIES:
        m = models.get(cat)
        if isinstance(m, (str, Path)):
            try:
                m = load_model(m)
            except (OSError, ValueError, GraphError) as exc:
                log.warning("category %s skipped: %s", cat, exc)
                m = None
        if m is None:
            missing.append(cat)
        else:
            loaded[cat] = m
    out = []
    for s in slicks:
        x = np.stack([centered_patch(values, *s.centroid), centered_patch(soft, *s.centroid)])[None]
        preds = {}
        for cat, g in loaded.items():
            with torch.no_grad():
                run = execute_graph(g, {"image": torch.from_numpy(x.astype(np.float32)).to(g.dtype)}, INFERENCE)
            preds[cat] = CATEGORIES[cat][int(run.values["probs"][0].argmax())]
        out.append(SlickClassification(preds, list(missing)))
    return out


# run ----------------------------------------------------------------------


@dataclass
class ProductResult:
    product_id: str
    timestamp: str
    features: list[dict] = field(default_factory=list)
    error: str | None = None


@dataclass
class RunReport:
    queried: int = 0
    fetched: int = 0
    with_detections: int = 0
    slicks: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"queried": self.queried, "fetched": self.fetched, "with_detections": self.with_detections,
                "slicks": self.slicks, "failures": [list(f) for f in self.failures]}


def detect_product(raw: RasterProduct, model: Graph, request: PipelineRequest,
                   category_models: dict | None = None) -> list[dict]:
    product = preprocess_product(raw)
    soft = predict_tiled(model, product.values, request.window, request.use_tta)
    mask = filter_color(soft, request.tau_filter, request.tau_color)
    slicks = prune_slicks(extract_slicks(mask, soft, product.meta.pixel_size_m),
                          request.min_area_km2, request.max_isolation_km)
    cats = None
    if category_models is not None:
        results = classify_slicks(slicks, product.values, soft, category_models)
        cats = [r.values | ({"_missing": r.missing} if r.missing else {}) for r in results]
    meta = {"product_id": product.meta.product_id, "timestamp": product.meta.timestamp}
    return emit_geojson(slicks, product.meta.georef, meta, cats)["features"]


def run_pipeline(request: PipelineRequest, source: ProductSource, model: Graph | None = None,
                 category_models: dict | None = None) -> tuple[dict, RunReport]:
    """Detect slicks in every matching product; failures are isolated per product."""
    if model is None:
        if request.model_path is None:
            raise PipelineError("no model given and no model_path in the request")
        model = load_model(request.model_path)
    if request.classify and category_models is None:
        category_models = dict(request.category_models)
    if not request.classify:
        category_models = None
    descriptors = source.query(request.area, request.start, request.end, request.overlap_min)
    report = RunReport(queried=len(descriptors))

    def work(d: ProductDescriptor) -> ProductResult:
        try:
            raw = source.fetch(d)
        except Exception as exc:  # noqa: BLE001 - any fetch failure is isolated
            return ProductResult(d.product_id, d.timestamp, error=f"fetch: {exc}")
        try:
            return ProductResult(d.product_id, d.timestamp, detect_product(raw, model, request, category_models))
        except Exception as exc:  # noqa: BLE001
            log.warning("product %s failed: %s", d.product_id, exc)
            return ProductResult(d.product_id, d.timestamp, error=str(exc) or type(exc).__name__)

    if request.workers > 1:
        with ThreadPoolExecutor(request.workers) as pool:
            results = list(pool.map(work, descriptors))
    else:
        results = [work(d) for d in descriptors]
    features = []
    for r in sorted(results, key=lambda r: r.product_id):
        if r.error is not None:
            report.failures.append((r.product_id, r.error))
            if not r.error.startswith("fetch"):
                report.fetched += 1
            continue
        report.fetched += 1
        report.with_detections += bool(r.features)
        report.slicks += len(r.features)
        features.extend(r.features)
    return {"type": "FeatureCollection", "features": features}, report
