"""Synthetic SAR-like patches and products with exactly known slick masks.

Sea clutter is gamma speckle around a slowly varying mean; slicks are dark
regions obtained by multiplying the clutter with a damping factor inside a
procedurally drawn mask. Shape families map onto the shape categories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as fill_polygon

from .labels import CATEGORIES, CategoryLabel
from .patches import Sample
from .raster import Georef, RasterMeta, RasterProduct

FAMILIES = ("patch", "linear", "angular", "tailed")
DAMPING = {"strong": 0.3, "weak": 0.65}


@dataclass
class SynthConfig:
    n_samples: int = 100
    size: int = 160
    families: tuple[str, ...] = FAMILIES
    contrast: str = "strong"
    slick_prob: float = 1.0
    sea_mean: float = 0.45
    looks: float = 10.0
    center_jitter: int = 15

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.size < 32:
            raise ValueError("size must be >= 32")
        bad = set(self.families) - set(FAMILIES)
        if bad or not self.families:
            raise ValueError(f"unknown slick families {sorted(bad)}")
        if self.contrast not in ("strong", "weak", "variable"):
            raise ValueError("contrast must be strong, weak or variable")
        if not 0.0 <= self.slick_prob <= 1.0:
            raise ValueError("slick_prob must lie in [0, 1]")


def sea_clutter(shape, mean: float, looks: float, rng: np.random.Generator) -> np.ndarray:
    swell = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=max(shape) / 8, mode="wrap")
    swell = 1.0 + 0.15 * swell / (swell.std() + 1e-12)
    speckle = rng.gamma(looks, 1.0 / looks, shape)
    return ndimage.gaussian_filter(mean * swell * speckle, sigma=0.7)


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def _draw(shape, rows, cols) -> np.ndarray:
    m = np.zeros(shape, dtype=np.uint8)
    rr, cc = fill_polygon(rows, cols, shape)
    m[rr, cc] = 1
    return m


def slick_mask(family: str, shape, center, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Binary mask of one slick of the given shape family."""
    cr, cc = center
    angle = rng.uniform(0, np.pi)
    t = np.linspace(0, 2 * np.pi, 120, endpoint=False)
    if family == "patch":
        a, b = rng.uniform(14, 26) * scale, rng.uniform(12, 20) * scale
        wobble = 1 + 0.12 * np.sin(3 * t + rng.uniform(0, 6)) + 0.06 * np.sin(5 * t + rng.uniform(0, 6))
        pts = np.stack([a * wobble * np.cos(t), b * wobble * np.sin(t)], axis=1)
    elif family == "linear":
        length, width = rng.uniform(45, 65) * scale, rng.uniform(2.5, 4.0) * scale
        pts = np.stack([length * np.cos(t), width * np.sin(t)], axis=1)
    elif family == "angular":
        k = int(rng.integers(3, 5))
        base = np.arange(k) * 2 * np.pi / k + rng.uniform(-0.35, 0.35, k)
        r = rng.uniform(20, 30, k) * scale
        pts = np.stack([r * np.cos(base), r * np.sin(base)], axis=1)
    elif family == "tailed":
        head = rng.uniform(11, 16) * scale
        tail = rng.uniform(45, 60) * scale
        upper = np.stack([np.linspace(0, tail, 30), np.linspace(head * 0.6, 1.0 * scale, 30)], axis=1)
        lower = upper[::-1] * np.array([1, -1])
        circle = np.stack([head * np.cos(t), head * np.sin(t)], axis=1)
        m1 = _draw(shape, *(_rotate(circle, angle) + [cr, cc]).T)
        body = np.concatenate([upper, lower])
        m2 = _draw(shape, *(_rotate(body, angle) + [cr, cc]).T)
        return m1 | m2
    else:
        raise ValueError(f"unknown family {family!r}")
    pts = _rotate(pts, angle) + [cr, cc]
    return _draw(shape, pts[:, 0], pts[:, 1])


def eccentricity(mask: np.ndarray) -> float:
    """Eccentricity of the ellipse with the same second central moments."""
    rows, cols = np.nonzero(mask)
    if len(rows) < 2:
        return 0.0
    cov = np.cov(np.stack([rows, cols]).astype(float))
    lo, hi = np.linalg.eigvalsh(cov)
    return float(np.sqrt(max(0.0, 1 - lo / hi))) if hi > 0 else 0.0


def _damping(contrast: str, rng) -> float:
    return DAMPING[contrast] if contrast in DAMPING else float(rng.uniform(DAMPING["strong"], DAMPING["weak"]))


def _label(family: str | None, contrast: str, rng) -> CategoryLabel:
    return CategoryLabel(
        patch=family == "patch",
        linear=family == "linear",
        angular=family == "angular",
        tailed=family == "tailed",
        weathered=bool(rng.random() < 0.3),
        shape_outline="continuous",
        texture=str(rng.choice(CATEGORIES["texture"])),
        contrast=contrast,
        edge="sharp",
    )


def synthesize_dataset(config: SynthConfig, rng: np.random.Generator | int | None = 0) -> list[Sample]:
    rng = np.random.default_rng(rng)
    shape = (config.size, config.size)
    out = []
    for i in range(config.n_samples):
        sea = sea_clutter(shape, config.sea_mean, config.looks, rng)
        family = None
        mask = np.zeros(shape, dtype=np.uint8)
        if rng.random() < config.slick_prob:
            family = str(rng.choice(config.families))
            j = config.center_jitter
            center = (config.size / 2 + rng.uniform(-j, j), config.size / 2 + rng.uniform(-j, j))
            mask = slick_mask(family, shape, center, rng, scale=config.size / 160)
        contrast = config.contrast if config.contrast != "variable" else str(rng.choice(["strong", "weak"]))
        factor = np.where(mask > 0, _damping(contrast, rng), 1.0)
        vv = np.clip(sea * factor, 0.0, 1.0).astype(np.float32)
        out.append(Sample(
            vv=vv,
            mask=mask,
            event_id=i if family else None,
            incidence_angle=float(rng.uniform(30.0, 45.0)),
            categories=_label(family, contrast, rng) if family else None,
            extra={"family": family} if family else {},
        ))
    return out


# whole products -----------------------------------------------------------


@dataclass
class PlantedSlick:
    row: float
    col: float
    radius: float
    family: str = "patch"


@dataclass
class SyntheticProduct:
    raw: RasterProduct
    mask: np.ndarray
    event_map: np.ndarray
    labels: dict[int, CategoryLabel] = field(default_factory=dict)
    planted: list[PlantedSlick] = field(default_factory=list)


def _disk(shape, row, col, radius) -> np.ndarray:
    rr, cc = np.ogrid[: shape[0], : shape[1]]
    return ((rr - row) ** 2 + (cc - col) ** 2 <= radius**2).astype(np.uint8)


def synthesize_product(
    height: int,
    width: int,
    slicks: list[PlantedSlick],
    rng: np.random.Generator | int | None = 0,
    product_id: str = "synthetic",
    timestamp: str = "2020-06-01T10:00:00Z",
    georef: Georef | None = None,
    sea_raw: float = 80.0,
    factor: int = 4,
) -> SyntheticProduct:
    """Raw 10 m product whose slicks are planted on the 40 m output grid.

    ``height``/``width`` and slick coordinates are in 40 m pixels. Disks are
    used for ``family == "disk"``; other families use :func:`slick_mask`.
    """
    rng = np.random.default_rng(rng)
    shape40 = (height, width)
    mask = np.zeros(shape40, dtype=np.uint8)
    events = np.zeros(shape40, dtype=np.int32)
    labels = {}
    for i, s in enumerate(slicks, start=1):
        if s.family == "disk":
            m = _disk(shape40, s.row, s.col, s.radius)
        else:
            m = slick_mask(s.family, shape40, (s.row, s.col), rng, scale=s.radius / 20)
        mask |= m
        events[(m > 0) & (events == 0)] = i
        labels[i] = _label(s.family if s.family in FAMILIES else "patch", "strong", rng)
    shape10 = (height * factor, width * factor)
    speckle = rng.gamma(1.0, 1.0, shape10)
    swell = 1.0 + 0.1 * ndimage.gaussian_filter(rng.normal(0, 1, shape40), 6, mode="wrap")
    damp40 = np.where(mask > 0, DAMPING["strong"], 1.0) * swell
    damp10 = np.kron(damp40, np.ones((factor, factor)))
    raw = np.clip(sea_raw * damp10 * speckle, 0, 65535).astype(np.uint16)
    if georef is None:
        georef = Georef(10.0, 60.0, 1e-4, -1e-4)
    meta = RasterMeta(product_id, timestamp, 10.0, 31.0, 44.0, georef)
    return SyntheticProduct(RasterProduct(raw, meta), mask, events, labels, list(slicks))
