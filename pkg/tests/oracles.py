"""Independent reference implementations used as test oracles.

These are written from the textbook definitions in plain Python, without
the package's vectorised code paths.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def flood_fill_components(mask) -> list[set[tuple[int, int]]]:
    """8-connected components by breadth-first search."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp = set()
                q = deque([(r, c)])
                seen[r, c] = True
                while q:
                    y, x = q.popleft()
                    comp.add((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = y + dy, x + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                q.append((ny, nx))
                comps.append(comp)
    return comps


def component_box(comp) -> tuple[int, int, int, int]:
    rows = [p[0] for p in comp]
    cols = [p[1] for p in comp]
    return min(rows), min(cols), max(rows), max(cols)


def bbox_oracle(pred, truth):
    """All-pairs box matching: (tp, fp, fn, sorted ious)."""
    pb = [component_box(c) for c in flood_fill_components(pred)]
    tb = [component_box(c) for c in flood_fill_components(truth)]

    def inter(a, b):
        rows = [r for r in range(a[0], a[2] + 1) if b[0] <= r <= b[2]]
        cols = [c for c in range(a[1], a[3] + 1) if b[1] <= c <= b[3]]
        return len(rows) * len(cols)

    def area(a):
        return (a[2] - a[0] + 1) * (a[3] - a[1] + 1)

    ious, tp = [], 0
    for t in tb:
        if any(inter(p, t) > 0 for p in pb):
            tp += 1
    fp = sum(1 for p in pb if not any(inter(p, t) > 0 for t in tb))
    for p in pb:
        for t in tb:
            i = inter(p, t)
            if i:
                ious.append(i / (area(p) + area(t) - i))
    return tp, fp, len(tb) - tp, sorted(ious)


def lovasz_oracle(margins, truth) -> float:
    """Binary Lovász hinge as the Choquet integral of the Jaccard set loss.

    F(A) = 1 - |gt minus A| / |gt union A| for the set A of mispredicted pixels;
    the extension at the hinge errors m is the integral over t of
    F({i : m_i >= t}), evaluated exactly on the level sets.
    """
    margins = [float(v) for v in margins]
    truth = [int(v) for v in truth]
    signs = [2 * t - 1 for t in truth]
    errors = [max(0.0, 1.0 - s * m) for s, m in zip(signs, margins)]
    gt = {i for i, t in enumerate(truth) if t}

    def jaccard_set_loss(a: set) -> float:
        union = gt | a
        if not union:
            return 0.0
        return 1.0 - len(gt - a) / len(union)

    levels = sorted({e for e in errors if e > 0})
    total, prev = 0.0, 0.0
    for t in levels:
        total += (t - prev) * jaccard_set_loss({i for i, e in enumerate(errors) if e >= t})
        prev = t
    return total


def chi2_sf_series(x: float, df: int) -> float:
    """1 - P(df/2, x/2) with the lower incomplete gamma power series."""
    if x <= 0:
        return 1.0
    a, z = df / 2.0, x / 2.0
    term = 1.0 / a
    total = term
    n = 1
    while True:
        term *= z / (a + n)
        total += term
        if term < total * 1e-17 or n > 10000:
            break
        n += 1
    lower = math.exp(a * math.log(z) - z - math.lgamma(a)) * total
    return max(0.0, 1.0 - lower)


def kruskal_oracle(groups) -> float:
    """H from average ranks via the variance-ratio form (tie-corrected by construction)."""
    pooled = [v for g in groups for v in g]
    n = len(pooled)

    def rank(v):
        less = sum(1 for u in pooled if u < v)
        equal = sum(1 for u in pooled if u == v)
        return less + (equal + 1) / 2.0

    ranks = [[rank(v) for v in g] for g in groups]
    mean = (n + 1) / 2.0
    between = sum(len(r) * (sum(r) / len(r) - mean) ** 2 for r in ranks)
    within = sum((x - mean) ** 2 for r in ranks for x in r)
    return (n - 1) * between / within if within else 0.0


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g
