"""Segmentation and classification metrics, threshold sweeps and the
incidence-angle Kruskal–Wallis analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import gammaincc
from scipy.stats import rankdata

from .data.labels import CATEGORIES, value_index

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class EvaluationError(ValueError):
    pass


# pixels -------------------------------------------------------------------


@dataclass
class PixelMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float


def f1_from_counts(tp: int, fp: int, fn: int) -> PixelMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PixelMetrics(int(tp), int(fp), int(fn), precision, recall, f1)


def pixel_counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int]:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise EvaluationError(f"prediction {p.shape} and truth {t.shape} are not aligned")
    return int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t))


def pixel_metrics(soft: np.ndarray, truth: np.ndarray, tau: float = 0.5) -> PixelMetrics:
    """Pixel precision, recall and F1 after thresholding ``soft`` at ``tau`` (ties positive)."""
    return f1_from_counts(*pixel_counts(np.asarray(soft) >= tau, truth))


# boxes --------------------------------------------------------------------

Box = tuple[int, int, int, int]  # inclusive (row0, col0, row1, col1)


def component_boxes(mask: np.ndarray) -> list[Box]:
    labels, _ = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return [(s[0].start, s[1].start, s[0].stop - 1, s[1].stop - 1) for s in ndimage.find_objects(labels)]


def box_intersection(a: Box, b: Box) -> int:
    h = min(a[2], b[2]) - max(a[0], b[0]) + 1
    w = min(a[3], b[3]) - max(a[1], b[1]) + 1
    return max(h, 0) * max(w, 0)


def box_area(a: Box) -> int:
    return (a[2] - a[0] + 1) * (a[3] - a[1] + 1)


def box_iou(a: Box, b: Box) -> float:
    inter = box_intersection(a, b)
    return inter / (box_area(a) + box_area(b) - inter)


@dataclass
class BoxMetrics:
    tp: int
    fp: int
    fn: int
    ious: list[float] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        """Mean over intersecting pairs; 0 when nothing intersects."""
        return float(np.mean(self.ious)) if self.ious else 0.0


def bbox_metrics(pred: np.ndarray, truth: np.ndarray) -> BoxMetrics:
    """Box-level counts with set semantics: any intersection validates a box."""
    if np.shape(pred) != np.shape(truth):
        raise EvaluationError("prediction and truth masks are not aligned")
    pb, tb = component_boxes(pred), component_boxes(truth)
    if not pb or not tb:
        return BoxMetrics(0, len(pb), len(tb))
    p = np.array(pb)[:, None, :]
    t = np.array(tb)[None, :, :]
    h = np.minimum(p[..., 2], t[..., 2]) - np.maximum(p[..., 0], t[..., 0]) + 1
    w = np.minimum(p[..., 3], t[..., 3]) - np.maximum(p[..., 1], t[..., 1]) + 1
    inter = np.clip(h, 0, None) * np.clip(w, 0, None)
    hit = inter > 0
    pa = (p[..., 2] - p[..., 0] + 1) * (p[..., 3] - p[..., 1] + 1)
    ta = (t[..., 2] - t[..., 0] + 1) * (t[..., 3] - t[..., 1] + 1)
    ious = (inter / (pa + ta - inter))[hit]
    tp = int(hit.any(axis=0).sum())
    return BoxMetrics(tp, int((~hit.any(axis=1)).sum()), len(tb) - tp, [float(v) for v in ious])


# sweeps -------------------------------------------------------------------


@dataclass
class SweepRow:
    tau: float
    positives: int
    precision: float
    recall: float
    f1: float
    tp_boxes: int
    fp_boxes: int
    fn_boxes: int
    mean_iou: float


def threshold_sweep(soft: np.ndarray, truth: np.ndarray, taus) -> list[SweepRow]:
    taus = [float(t) for t in taus]
    if not taus or any(not 0 < t < 1 for t in taus) or any(b <= a for a, b in zip(taus, taus[1:])):
        raise EvaluationError("tau grid must be non-empty, inside (0, 1) and ascending")
    rows = []
    for tau in taus:
        pred = np.asarray(soft) >= tau
        pm = f1_from_counts(*pixel_counts(pred, truth))
        bm = bbox_metrics(pred, truth)
        rows.append(SweepRow(tau, int(pred.sum()), pm.precision, pm.recall, pm.f1, bm.tp, bm.fp, bm.fn, bm.mean_iou))
    return rows


def write_csv(rows, path) -> Path:
    """Write a list of dataclass rows (or dicts) as CSV."""
    path = Path(path)
    dicts = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    with path.open("w", newline="") as fh:
        if dicts:
            w = csv.DictWriter(fh, fieldnames=list(dicts[0]))
            w.writeheader()
            w.writerows(dicts)
    return path


# Kruskal–Wallis -----------------------------------------------------------


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function via the regularised upper incomplete gamma."""
    if df < 1:
        raise EvaluationError("df must be >= 1")
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass
class KruskalResult:
    h: float
    p: float
    df: int


def kruskal_wallis(groups) -> KruskalResult:
    """H statistic with tie correction from average ranks of the pooled data."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    groups = [g for g in groups if g.size]
    if len(groups) < 2:
        raise EvaluationError("Kruskal–Wallis needs at least two non-empty groups")
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = rankdata(pooled)
    bounds = np.cumsum([0] + [g.size for g in groups])
    h = 12.0 / (n * (n + 1)) * sum(
        ranks[a:b].sum() ** 2 / (b - a) for a, b in zip(bounds[:-1], bounds[1:])
    ) - 3 * (n + 1)
    _, ties = np.unique(pooled, return_counts=True)
    correction = 1.0 - np.sum(ties**3 - ties) / (n**3 - n)
    df = len(groups) - 1
    if correction <= 0:
        return KruskalResult(0.0, 1.0, df)  # every value tied
    h = max(h / correction, 0.0)
    return KruskalResult(float(h), chi2_sf(h, df), df)


@dataclass
class AngleBin:
    angle: float
    mean_f1: float
    std_f1: float
    count: int


@dataclass
class AngleAnalysis:
    bins: list[AngleBin]
    h: float
    p: float


def incidence_angle_analysis(records, bin_width: float = 1.0) -> AngleAnalysis:
    """Per-angle F1 statistics and a Kruskal–Wallis test across angle bins.

    ``records`` is an iterable of ``(angle_deg, f1)``; bins are
    ``[k * bin_width, (k + 1) * bin_width)``.
    """
    if bin_width <= 0:
        raise EvaluationError("bin_width must be positive")
    grouped: dict[float, list[float]] = {}
    for angle, f1 in records:
        key = math.floor(angle / bin_width) * bin_width
        grouped.setdefault(key, []).append(float(f1))
    if len(grouped) < 2:
        raise EvaluationError(f"need at least two angle bins, got {len(grouped)}")
    bins = [AngleBin(k, float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(grouped.items())]
    kw = kruskal_wallis([grouped[b.angle] for b in bins])
    return AngleAnalysis(bins, kw.h, kw.p)


# classification -----------------------------------------------------------


@dataclass
class ClassificationMetrics:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray


def classification_metrics(predictions, labels, category: str) -> ClassificationMetrics:
    """Accuracy and macro F1 over the values seen in labels or predictions.

    ``predictions`` may be class indices or (N, k) probability rows; labels
    may be indices or category values.
    """
    if category not in CATEGORIES:
        raise EvaluationError(f"unknown category {category!r}")
    k = len(CATEGORIES[category])
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    pred = np.array([value_index(category, int(p)) for p in pred])
    truth = np.array([value_index(category, v if isinstance(v, str) else int(v)) for v in labels])
    if pred.shape != truth.shape or not truth.size:
        raise EvaluationError("predictions and labels must be non-empty and aligned")
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (truth, pred), 1)
    f1s = []
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        if tp + fp + fn:
            f1s.append(f1_from_counts(tp, fp, fn).f1)
    return ClassificationMetrics(float(np.mean(pred == truth)), float(np.mean(f1s)), confusion)


# report -------------------------------------------------------------------


@dataclass
class EvalReport:
    pixel: PixelMetrics
    boxes: BoxMetrics
    sweep: list[SweepRow] = field(default_factory=list)
    angles: AngleAnalysis | None = None

    @property
    def mean_iou(self) -> float:
        return self.boxes.mean_iou

    def summary(self) -> dict:
        out = {
            "precision": self.pixel.precision,
            "recall": self.pixel.recall,
            "f1": self.pixel.f1,
            "tp_boxes": self.boxes.tp,
            "fp_boxes": self.boxes.fp,
            "fn_boxes": self.boxes.fn,
            "mean_iou": self.boxes.mean_iou,
        }
        if self.angles is not None:
            out["kruskal_h"] = self.angles.h
            out["kruskal_p"] = self.angles.p
        return out

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "summary.json").write_text(json.dumps(self.summary(), indent=1))
        if self.sweep:
            write_csv(self.sweep, directory / "threshold_sweep.csv")
        if self.angles is not None:
            write_csv(self.angles.bins, directory / "incidence_angles.csv")
        return directory


def evaluate_maps(softs, truths, tau: float = 0.5, taus=None, angles=None) -> EvalReport:
    """Pooled report over aligned lists of soft maps and truth masks."""
    softs, truths = list(softs), list(truths)
    if len(softs) != len(truths) or not softs:
        raise EvaluationError("need equally many soft maps and truth masks")
    tp = fp = fn = 0
    btp = bfp = bfn = 0
    ious: list[float] = []
    per_sample = []
    for s, t in zip(softs, truths):
        c = pixel_counts(np.asarray(s) >= tau, t)
        tp, fp, fn = tp + c[0], fp + c[1], fn + c[2]
        per_sample.append(f1_from_counts(*c).f1)
        b = bbox_metrics(np.asarray(s) >= tau, t)
        btp, bfp, bfn = btp + b.tp, bfp + b.fp, bfn + b.fn
        ious.extend(b.ious)
    sweep = []
    if taus is not None:
        pooled_soft = np.concatenate([np.asarray(s).ravel() for s in softs])
        pooled_truth = np.concatenate([np.asarray(t).ravel() for t in truths])
        for tau_i in taus:
            rows = [threshold_sweep(s, t, [tau_i])[0] for s, t in zip(softs, truths)]
            pm = pixel_metrics(pooled_soft, pooled_truth, tau_i)
            bi = [v for s, t in zip(softs, truths) for v in bbox_metrics(np.asarray(s) >= tau_i, t).ious]
            sweep.append(SweepRow(
                float(tau_i), int(sum(r.positives for r in rows)), pm.precision, pm.recall, pm.f1,
                sum(r.tp_boxes for r in rows), sum(r.fp_boxes for r in rows), sum(r.fn_boxes for r in rows),
                float(np.mean(bi)) if bi else 0.0,
            ))
    angle_report = None
    if angles is not None and len(set(math.floor(a) for a in angles)) >= 2:
        angle_report = incidence_angle_analysis(zip(angles, per_sample))
    return EvalReport(f1_from_counts(tp, fp, fn), BoxMetrics(btp, bfp, bfn, ious), sweep, angle_report)
