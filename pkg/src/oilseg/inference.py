"""Whole-product prediction and post-processing.

Sliding-window prediction with dihedral test-time augmentation and smooth
blending, hysteresis thresholding (filter/colour), slick extraction and
pruning, and a naive dense CRF for small crops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .graph import INFERENCE, Graph, execute_graph
from .models import pooling_depth

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
WINDOW_MULTIPLE = 32
CRF_MAX_PIXELS = 64 * 64


class InferenceError(ValueError):
    pass


# tiling -------------------------------------------------------------------


def dihedral(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Apply a horizontal flip (optional) then ``k`` quarter turns to the last two axes."""
    if flip:
        x = x[..., ::-1]
    return np.rot90(x, k, axes=(-2, -1))


def dihedral_inverse(x: np.ndarray, k: int, flip: bool) -> np.ndarray:
    x = np.rot90(x, -k, axes=(-2, -1))
    if flip:
        x = x[..., ::-1]
    return x


DIHEDRAL = [(k, f) for f in (False, True) for k in range(4)]


def spline_window(size: int) -> np.ndarray:
    """Separable squared-sine window; shifted copies at stride size/2 sum to 1."""
    w = np.sin(np.pi * (np.arange(size) + 0.5) / size) ** 2
    return np.outer(w, w)


def model_predict(graph: Graph, batch: np.ndarray, output: str = "prob") -> np.ndarray:
    """Evaluate a segmentation graph on an (N, H, W) float batch."""
    x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))[:, None]
    with torch.no_grad():
        run = execute_graph(graph, {"image": x.to(graph.dtype)}, INFERENCE)
    return run.values[output][:, 0].numpy()


def predict_window(graph: Graph, window: np.ndarray, use_tta: bool) -> np.ndarray:
    if not use_tta:
        return model_predict(graph, window[None])[0]
    views = np.stack([dihedral(window, k, f) for k, f in DIHEDRAL])
    preds = model_predict(graph, views)
    return np.mean([dihedral_inverse(p, k, f) for p, (k, f) in zip(preds, DIHEDRAL)], axis=0)


def _layout(h: int, w: int, window: int, stride: int, blend: str):
    """Leading margin and trailing pads so every pixel sees a full set of windows."""
    margin = window - stride if blend == "spline" else 0

    def trailing(n):
        covered = margin + n
        last = max(0, -(-(covered - window) // stride)) * stride + window
        if blend == "spline":
            # the last real pixel must also be covered by the overlapping window
            last = max(last, -(-covered // stride) * stride + window - stride)
        return last - covered

    return margin, trailing(h), trailing(w)


def predict_tiled(
    graph: Graph,
    image: np.ndarray,
    window: int = 160,
    use_tta: bool = True,
    stride: int | None = None,
    blend: str = "spline",
) -> np.ndarray:
    """Soft oil map of a whole product.

    Windows slide at ``stride`` (default ``window // 2``) over a mirror-padded
    copy of ``image``. Predictions are blended with ``blend`` weights
    ("spline" or "rect") and normalised by the accumulated weight, which for
    the spline window at half-window stride is already exactly 1.
    """
    if window % WINDOW_MULTIPLE:
        raise InferenceError(f"window {window} is not divisible by {WINDOW_MULTIPLE}")
    if blend not in ("spline", "rect"):
        raise InferenceError(f"unknown blend {blend!r}")
    depth = pooling_depth(graph)
    if window % (2**depth):
        raise InferenceError(f"window {window} incompatible with {depth} pooling levels")
    stride = stride or window // 2
    if not 0 < stride <= window:
        raise InferenceError("stride must lie in (0, window]")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    margin, pad_h, pad_w = _layout(h, w, window, stride, blend)
    if max(margin, pad_h) >= h or max(margin, pad_w) >= w:
        raise InferenceError(f"window {window} larger than the mirror-padded {h}x{w} product")
    padded = np.pad(image, ((margin, pad_h), (margin, pad_w)), mode="reflect")
    ph, pw = padded.shape
    weights = spline_window(window) if blend == "spline" else np.ones((window, window))
    acc = np.zeros((ph, pw))
    wsum = np.zeros((ph, pw))
    for r in range(0, ph - window + 1, stride):
        for c in range(0, pw - window + 1, stride):
            pred = predict_window(graph, padded[r : r + window, c : c + window], use_tta)
            acc[r : r + window, c : c + window] += weights * pred
            wsum[r : r + window, c : c + window] += weights
    crop = (slice(margin, margin + h), slice(margin, margin + w))
    return np.clip(acc[crop] / wsum[crop], 0.0, 1.0).astype(np.float32)


def blend_weights(shape: tuple[int, int], window: int, stride: int | None = None) -> np.ndarray:
    """Raw spline weight sum at every product pixel (before normalisation)."""
    stride = stride or window // 2
    h, w = shape
    margin, pad_h, pad_w = _layout(h, w, window, stride, "spline")
    ph, pw = h + margin + pad_h, w + margin + pad_w
    wsum = np.zeros((ph, pw))
    sw = spline_window(window)
    for r in range(0, ph - window + 1, stride):
        for c in range(0, pw - window + 1, stride):
            wsum[r : r + window, c : c + window] += sw
    return wsum[margin : margin + h, margin : margin + w]


def predict_padded(graph: Graph, image: np.ndarray, multiple: int | None = None) -> np.ndarray:
    """Single-pass prediction: mirror-pad to a multiple of the pooling factor, then crop."""
    multiple = multiple or 2 ** pooling_depth(graph)
    h, w = image.shape
    ph, pw = -h % multiple, -w % multiple
    padded = np.pad(image, ((0, ph), (0, pw)), mode="reflect") if ph or pw else image
    return model_predict(graph, padded[None])[0][:h, :w]


# thresholds ---------------------------------------------------------------


def threshold_mask(soft: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """1 where ``soft >= tau``."""
    if not 0.0 < tau < 1.0:
        raise InferenceError("tau must lie in (0, 1)")
    return (np.asarray(soft) >= tau).astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return labels, int(n)


def filter_color(soft: np.ndarray, tau_filter: float = 0.8, tau_color: float = 0.5) -> np.ndarray:
    """Keep the ``tau_color`` components that contain a pixel >= ``tau_filter``."""
    if tau_filter < tau_color:
        raise InferenceError("tau_filter must be >= tau_color")
    color = threshold_mask(soft, tau_color)
    labels, n = label_components(color)
    if n == 0:
        return color
    peak = ndimage.maximum(soft, labels, index=np.arange(1, n + 1))
    keep = np.concatenate([[False], np.asarray(peak) >= tau_filter])
    return keep[labels].astype(np.uint8)


# polygons -----------------------------------------------------------------

_STEP = {(0, 1): "E", (0, -1): "W", (1, 0): "S", (-1, 0): "N"}


def _boundary_edges(pixels: np.ndarray) -> dict:
    """Directed pixel-edge boundary with the region on the left (x=col, y=row, y down)."""
    m = np.pad(pixels.astype(bool), 1)
    core = m[1:-1, 1:-1]
    out: dict = {}

    def add(starts, ends):
        for a, b in zip(starts, ends):
            out.setdefault(a, []).append(b)

    rows, cols = np.nonzero(core & ~m[:-2, 1:-1])  # top edge, heading west
    add(zip(cols + 1, rows), zip(cols, rows))
    rows, cols = np.nonzero(core & ~m[2:, 1:-1])  # bottom edge, heading east
    add(zip(cols, rows + 1), zip(cols + 1, rows + 1))
    rows, cols = np.nonzero(core & ~m[1:-1, :-2])  # left edge, heading south
    add(zip(cols, rows), zip(cols, rows + 1))
    rows, cols = np.nonzero(core & ~m[1:-1, 2:])  # right edge, heading north
    add(zip(cols + 1, rows + 1), zip(cols + 1, rows))
    return {tuple(map(int, k)): [tuple(map(int, v)) for v in vs] for k, vs in out.items()}


def _left_of(d_in, d_out) -> bool:
    # left turn in screen coordinates (y down): cross product < 0
    return d_in[0] * d_out[1] - d_in[1] * d_out[0] < 0


def trace_rings(pixels: np.ndarray) -> list[list[tuple[int, int]]]:
    """Closed rings of pixel-corner vertices ``(x, y)`` outlining a pixel set.

    At pinch vertices the left turn is taken, so diagonal neighbours get
    separate rings and every ring is simple.
    """
    edges = _boundary_edges(pixels)
    rings = []
    while edges:
        start = min(edges)
        ring = [start]
        prev, cur = None, start
        while True:
            options = edges[cur]
            if len(options) > 1 and prev is not None:
                d_in = (cur[0] - prev[0], cur[1] - prev[1])
                nxt = next((o for o in options if _left_of(d_in, (o[0] - cur[0], o[1] - cur[1]))), options[0])
            else:
                nxt = options[0]
            options.remove(nxt)
            if not options:
                del edges[cur]
            prev, cur = cur, nxt
            if cur == start:  # the smallest vertex is never a pinch point
                break
            ring.append(cur)
        ring.append(start)
        rings.append(_simplify(ring))
    return rings


def _simplify(ring: list) -> list:
    """Drop collinear vertices (keeps the ring closed)."""
    pts = ring[:-1]
    out = []
    n = len(pts)
    for i, p in enumerate(pts):
        a, b = pts[i - 1], pts[(i + 1) % n]
        if (p[0] - a[0]) * (b[1] - p[1]) - (p[1] - a[1]) * (b[0] - p[0]) != 0:
            out.append(p)
    return out + [out[0]]


def ring_area(ring) -> float:
    """Shoelace signed area."""
    pts = np.asarray(ring, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return float(0.5 * np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _point_in_ring(pt, ring) -> bool:
    x, y = pt
    inside = False
    pts = ring[:-1]
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        if (y1 > y) != (y2 > y):
            if x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
                inside = not inside
    return inside


def polygonize(pixels: np.ndarray) -> list[list[list[tuple[int, int]]]]:
    """Pixel-edge polygons: a list of ``[exterior, *holes]`` in pixel-corner (x, y).

    In (x, y-down) coordinates exteriors have negative shoelace area and holes
    positive, which becomes counter-clockwise exteriors once y points north.
    """
    rings = trace_rings(pixels)
    polys = [[r] for r in rings if ring_area(r) < 0]
    for hole in (r for r in rings if ring_area(r) > 0):
        (x0, y0), (x1, y1) = hole[0], hole[1]
        dx, dy = np.sign(x1 - x0), np.sign(y1 - y0)
        # a point just right of the first edge lies inside the hole
        probe = ((x0 + x1) / 2 - 0.25 * dy, (y0 + y1) / 2 + 0.25 * dx)
        owners = [p for p in polys if _point_in_ring(probe, p[0])]
        if not owners:
            raise InferenceError("hole ring without an enclosing exterior")
        min(owners, key=lambda p: -ring_area(p[0])).append(hole)
    return polys


# slicks -------------------------------------------------------------------


@dataclass
class Slick:
    pixels: tuple[np.ndarray, np.ndarray]
    bbox: tuple[int, int, int, int]
    polygons: list = field(repr=False)
    area_km2: float
    centroid: tuple[float, float]
    mean_score: float
    nn_distance_km: float = math.inf

    @property
    def pixel_count(self) -> int:
        return len(self.pixels[0])


def extract_slicks(mask: np.ndarray, soft: np.ndarray, pixel_size_m: float = 40.0) -> list[Slick]:
    """8-connected components of ``mask`` with their feature vectors."""
    labels, n = label_components(mask)
    if n == 0:
        return []
    soft = np.asarray(soft, dtype=np.float64)
    px_km2 = (pixel_size_m / 1000.0) ** 2
    slicks = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        local = labels[sl] == i
        rows, cols = np.nonzero(local)
        rows, cols = rows + sl[0].start, cols + sl[1].start
        polys = polygonize(local)
        polys = [[[(x + sl[1].start, y + sl[0].start) for x, y in ring] for ring in poly] for poly in polys]
        slicks.append(Slick(
            pixels=(rows, cols),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
            polygons=polys,
            area_km2=len(rows) * px_km2,
            centroid=(float(rows.mean()), float(cols.mean())),
            mean_score=float(soft[rows, cols].mean()),
        ))
    _nearest_neighbours(slicks, pixel_size_m)
    return slicks


def _nearest_neighbours(slicks: list[Slick], pixel_size_m: float) -> None:
    if len(slicks) < 2:
        for s in slicks:
            s.nn_distance_km = math.inf
        return
    c = np.array([s.centroid for s in slicks])
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    for s, dist in zip(slicks, d.min(axis=1)):
        s.nn_distance_km = float(dist * pixel_size_m / 1000.0)


def prune_slicks(slicks: list[Slick], min_area_km2: float = 0.25, max_isolation_km: float = 1.5) -> list[Slick]:
    """Drop slicks that are both smaller than ``min_area_km2`` and farther than
    ``max_isolation_km`` from every other slick (distances from the unpruned set)."""
    return [s for s in slicks if not (s.area_km2 < min_area_km2 and s.nn_distance_km > max_isolation_km)]


# CRF ----------------------------------------------------------------------


@dataclass
class CrfParams:
    w1: float = 5.0
    w2: float = 0.1
    theta_alpha_sq: float = 2.0
    theta_beta_sq: float = 2.0
    theta_gamma_sq: float = 1.0
    iterations: int = 5

    def __post_init__(self):
        if min(self.w1, self.w2) < 0 or min(self.theta_alpha_sq, self.theta_beta_sq, self.theta_gamma_sq) <= 0:
            raise InferenceError("CRF weights must be >= 0 and bandwidths > 0")
        if self.iterations < 0:
            raise InferenceError("iterations must be >= 0")


def crf_kernel(image: np.ndarray, params: CrfParams) -> np.ndarray:
    """Dense pairwise weights between all pixel pairs (zero on the diagonal)."""
    h, w = image.shape
    rr, cc = np.mgrid[:h, :w]
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    inten = np.asarray(image, dtype=np.float64).reshape(-1, 1)
    d_pos = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_int = ((inten[:, None, :] - inten[None, :, :]) ** 2).sum(-1)
    k = params.w1 * np.exp(-d_pos / params.theta_alpha_sq - d_int / params.theta_beta_sq)
    k += params.w2 * np.exp(-d_pos / params.theta_gamma_sq)
    np.fill_diagonal(k, 0.0)
    return k


def crf_refine(
    soft: np.ndarray, image: np.ndarray, params: CrfParams | None = None, max_pixels: int = CRF_MAX_PIXELS,
    history: list | None = None,
) -> np.ndarray:
    """Mean-field inference for a two-label dense CRF with Potts compatibility.

    Unaries are ``-log p`` and ``-log(1 - p)`` of the network output; returns
    the oil marginals. When ``history`` is given, the (N, 2) marginals of every
    iteration are appended to it.
    """
    params = params or CrfParams()
    soft = np.asarray(soft, dtype=np.float64)
    if soft.shape != np.shape(image):
        raise InferenceError("soft map and image must be aligned")
    if soft.size > max_pixels:
        raise InferenceError(f"crop of {soft.size} pixels exceeds the CRF limit of {max_pixels}")
    p = np.clip(soft.ravel(), 1e-7, 1 - 1e-7)
    unary = -np.log(np.stack([1 - p, p], axis=1))
    kernel = crf_kernel(image, params)
    q = np.exp(-unary)
    q /= q.sum(axis=1, keepdims=True)
    for _ in range(params.iterations):
        # Potts: the penalty for label l is the kernel mass on the other label
        message = kernel @ q
        energy = unary + message[:, ::-1]
        energy -= energy.min(axis=1, keepdims=True)
        q = np.exp(-energy)
        q /= q.sum(axis=1, keepdims=True)
        if history is not None:
            history.append(q.copy())
    return q[:, 1].reshape(soft.shape)
