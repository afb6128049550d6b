"""Patch samples, D1/D2 extraction, event-level splits, histograms and manifests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import CategoryLabel
from .raster import RasterProduct, read_grid, write_grid

PATCH_SIZE = 160

log = logging.getLogger(__name__)


class PatchError(ValueError):
    pass


@dataclass
class Sample:
    vv: np.ndarray
    mask: np.ndarray
    event_id: int | None = None
    incidence_angle: float = 37.5
    categories: CategoryLabel | None = None
    origin: tuple[int, int] | None = None
    product_id: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def oil_pixels(self) -> int:
        return int(self.mask.sum())


def grid_origins(height: int, width: int, size: int = PATCH_SIZE) -> list[tuple[int, int]]:
    return [(r, c) for r in range(0, height - size + 1, size) for c in range(0, width - size + 1, size)]


def _cut(product: RasterProduct, mask: np.ndarray, origin, size: int, event_id=None, label=None) -> Sample:
    r, c = origin
    angles = product.incidence_angles()
    return Sample(
        vv=np.asarray(product.values[r : r + size, c : c + size], dtype=np.float32),
        mask=np.asarray(mask[r : r + size, c : c + size], dtype=np.uint8),
        event_id=event_id,
        incidence_angle=float(angles[min(c + size // 2, len(angles) - 1)]),
        categories=label,
        origin=(r, c),
        product_id=product.meta.product_id,
    )


def central_origin(event_pixels: np.ndarray, origins: list[tuple[int, int]], size: int) -> tuple[int, int]:
    """Grid patch covering the event whose centre is nearest the event centroid.

    Ties go to the smallest row, then the smallest column.
    """
    rows, cols = np.nonzero(event_pixels)
    cr, cc = rows.mean(), cols.mean()
    covering = [o for o in origins if event_pixels[o[0] : o[0] + size, o[1] : o[1] + size].any()] or origins
    half = (size - 1) / 2
    return min(covering, key=lambda o: ((o[0] + half - cr) ** 2 + (o[1] + half - cc) ** 2, o[0], o[1]))


def extract_patches(
    product: RasterProduct,
    mask: np.ndarray,
    event_map: np.ndarray,
    labels: dict[int, CategoryLabel] | None = None,
    rng: np.random.Generator | int | None = 0,
    size: int = PATCH_SIZE,
) -> tuple[list[Sample], list[Sample]]:
    """Return ``(D1, D2)`` patch lists for one preprocessed product.

    D1 holds one central patch per event carrying the event label. D2 holds
    D1, every grid patch with at least one oil pixel, and as many randomly
    drawn oil-free patches.
    """
    rng = np.random.default_rng(rng)
    if mask.shape != product.values.shape or event_map.shape != product.values.shape:
        raise PatchError("mask and event map must be aligned with the product")
    origins = grid_origins(*mask.shape, size)
    if not origins:
        raise PatchError(f"product {mask.shape} smaller than one {size}x{size} patch")
    event_ids = sorted(labels) if labels is not None else sorted(int(e) for e in np.unique(event_map) if e)
    d1: list[Sample] = []
    for eid in event_ids:
        pixels = event_map == eid
        if not pixels.any():
            raise PatchError(f"event {eid} has an empty mask")
        origin = central_origin(pixels, origins, size)
        d1.append(_cut(product, mask, origin, size, eid, labels.get(eid) if labels else None))

    d2 = list(d1)
    taken = {s.origin for s in d1}
    for o in origins:
        if o not in taken and mask[o[0] : o[0] + size, o[1] : o[1] + size].any():
            d2.append(_cut(product, mask, o, size))
            taken.add(o)
    n_pos = len(d2)

    empty = [o for o in origins if o not in taken and not mask[o[0] : o[0] + size, o[1] : o[1] + size].any()]
    picks = [empty[i] for i in rng.permutation(len(empty))[:n_pos]]
    h, w = mask.shape
    attempts = 0
    while len(picks) < n_pos and attempts < 50 * n_pos:
        attempts += 1
        o = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
        if o not in taken and o not in picks and not mask[o[0] : o[0] + size, o[1] : o[1] + size].any():
            picks.append(o)
    if len(picks) < n_pos:
        log.warning("only %d oil-free patches available for %d oil patches", len(picks), n_pos)
    d2.extend(_cut(product, mask, o, size) for o in picks)
    return d1, d2


def oil_fraction(samples: list[Sample]) -> float:
    total = sum(s.mask.size for s in samples)
    return sum(s.oil_pixels for s in samples) / total if total else 0.0


def split_by_event(
    samples: list[Sample], fractions: dict[str, float], rng: np.random.Generator | int | None = 0
) -> dict[str, list[Sample]]:
    """Assign whole events to splits so no event spans two splits."""
    rng = np.random.default_rng(rng)
    groups: dict = {}
    for i, s in enumerate(samples):
        key = ("event", s.event_id) if s.event_id is not None else ("sample", i)
        groups.setdefault(key, []).append(s)
    keys = list(groups)
    order = rng.permutation(len(keys))
    names = list(fractions)
    total = sum(fractions.values())
    bounds = np.cumsum([fractions[n] / total for n in names]) * len(keys)
    out = {n: [] for n in names}
    for rank, k in enumerate(order):
        split = names[int(np.searchsorted(bounds, rank, side="right"))] if rank < bounds[-1] else names[-1]
        out[split].extend(groups[keys[k]])
    return out


@dataclass
class BackscatterHistogram:
    edges: np.ndarray
    oil: np.ndarray
    sea: np.ndarray
    oil_empty: bool
    sea_empty: bool

    def mode(self, which: str) -> float:
        h = self.oil if which == "oil" else self.sea
        i = int(np.argmax(h))
        return float((self.edges[i] + self.edges[i + 1]) / 2)


def backscatter_histogram(
    samples: list[Sample], bins: int = 100, value_range=(0.0, 500.0), scale: float = 150.0
) -> BackscatterHistogram:
    """Normalised per-class histograms of VV values in raw display units."""
    if bins < 1:
        raise PatchError("bins must be >= 1")
    vv = np.concatenate([s.vv.ravel() for s in samples]) * scale
    m = np.concatenate([s.mask.ravel() for s in samples]).astype(bool)

    def density(values):
        counts, edges = np.histogram(values, bins=bins, range=value_range)
        total = counts.sum()
        return (counts / total if total else counts.astype(float)), edges, total == 0

    oil, edges, oil_empty = density(vv[m])
    sea, _, sea_empty = density(vv[~m])
    if oil_empty or sea_empty:
        log.warning("histogram class empty: oil=%s sea=%s", oil_empty, sea_empty)
    return BackscatterHistogram(edges, oil, sea, oil_empty, sea_empty)


# manifests ----------------------------------------------------------------


def save_samples(splits: dict[str, list[Sample]], directory) -> Path:
    """Write every sample as a pair of G16R grids plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    records = []
    for split, samples in splits.items():
        for i, s in enumerate(samples):
            stem = f"patches/{split}_{i:06d}"
            write_grid(s.vv.astype(np.float32), directory / f"{stem}_vv.g16r")
            write_grid(s.mask.astype(np.uint8), directory / f"{stem}_mask.g16r")
            records.append({
                "vv": f"{stem}_vv.g16r",
                "mask": f"{stem}_mask.g16r",
                "split": split,
                "event_id": s.event_id,
                "incidence_angle": s.incidence_angle,
                "categories": s.categories.to_dict() if s.categories else None,
                "origin": list(s.origin) if s.origin else None,
                "product_id": s.product_id,
                **({"extra": s.extra} if s.extra else {}),
            })
    path = directory / "manifest.json"
    path.write_text(json.dumps({"samples": records}, indent=1))
    return path


def load_manifest(path, split: str | None = None) -> list[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    records = json.loads(path.read_text())["samples"]
    out = []
    for r in records:
        if split is not None and r["split"] != split:
            continue
        out.append(Sample(
            vv=read_grid(path.parent / r["vv"]),
            mask=read_grid(path.parent / r["mask"]),
            event_id=r.get("event_id"),
            incidence_angle=r.get("incidence_angle", 37.5),
            categories=CategoryLabel.from_dict(r["categories"]) if r.get("categories") else None,
            origin=tuple(r["origin"]) if r.get("origin") else None,
            product_id=r.get("product_id"),
            extra=r.get("extra", {}),
        ))
    return out
