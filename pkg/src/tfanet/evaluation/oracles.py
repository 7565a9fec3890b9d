"""Brute-force reference implementations of the metrics.

Deliberately slow and literal; they share no code with ``metrics``.
"""

from __future__ import annotations

import numpy as np


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def pixel_auroc_pairs(maps, masks) -> float:
    scores, labels = [], []
    for m, g in zip(maps, masks):
        scores.extend(np.asarray(m, dtype=float).ravel().tolist())
        labels.extend(np.asarray(g).astype(bool).ravel().tolist())
    return auroc_pairs(scores, labels)


def spro_thresholds(maps, regions, fpr_max: float = 0.05) -> float:
    """Sweep every distinct value (plus +-inf) and integrate piecewise linearly.

    ``regions`` is a list of ``(sample index, boolean mask, saturation)``.
    """
    maps = [np.asarray(m, dtype=float) for m in maps]
    normal_masks = [np.ones(m.shape, dtype=bool) for m in maps]
    for i, mask, _ in regions:
        normal_masks[i] &= ~mask
    n_normal = sum(int(n.sum()) for n in normal_masks)
    values = sorted({float(v) for m in maps for v in m.ravel()}, reverse=True)
    thresholds = [np.inf] + values + [-np.inf]
    points = []
    for t in thresholds:
        fp = sum(int(((m >= t) & n).sum()) for m, n in zip(maps, normal_masks))
        overlaps = []
        for i, mask, sat in regions:
            hit = int(((maps[i] >= t) & mask).sum())
            overlaps.append(min(hit / sat, 1.0))
        points.append((fp / n_normal, sum(overlaps) / len(overlaps)))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= fpr_max:
            break
        if x1 <= fpr_max:
            area += (x1 - x0) * (y0 + y1) / 2
        else:
            yf = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0)
            area += (fpr_max - x0) * (y0 + yf) / 2
    return area / fpr_max
