"""Rank-based AUROC and the saturated per-region overlap (sPRO) metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = stats.rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over all pixels of all samples pooled together."""
    maps = list(maps)
    masks = list(masks)
    if len(maps) != len(masks):
        raise ValueError("maps and masks differ in count")
    for m, g in zip(maps, masks):
        if np.shape(m) != np.shape(g):
            raise ValueError(f"map {np.shape(m)} and mask {np.shape(g)} differ")
    s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    y = np.concatenate([np.asarray(g).astype(bool).ravel() for g in masks])
    return auroc(s, y)


@dataclass
class Region:
    sample: int
    pixels: np.ndarray  # flat pixel indices within the sample
    saturation: float


class RegionGroundTruth:
    """Per-sample defect regions with their saturation thresholds."""

    def __init__(self, shapes, regions: list[Region]):
        self.shapes = [tuple(s) for s in shapes]
        self.regions = regions
        for i in range(len(self.shapes)):
            seen = set()
            for r in regions:
                if r.sample != i:
                    continue
                px = set(r.pixels.tolist())
                if seen & px:
                    raise ValueError(f"regions overlap in sample {i}")
                seen |= px

    @classmethod
    def from_masks(cls, masks, saturation=None) -> "RegionGroundTruth":
        """Connected components (8-connectivity) of each mask become regions.

        ``saturation`` is a callable ``area -> s_r``; default is the full area.
        """
        regions = []
        shapes = []
        for i, m in enumerate(masks):
            m = np.asarray(m).astype(bool)
            shapes.append(m.shape)
            lab, n = ndimage.label(m, structure=np.ones((3, 3)))
            flat = lab.ravel()
            for k in range(1, n + 1):
                px = np.flatnonzero(flat == k)
                s = float(px.size) if saturation is None else float(saturation(px.size))
                regions.append(Region(i, px, s))
        return cls(shapes, regions)

    def defect_mask(self, sample: int) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shapes[sample])), dtype=bool)
        for r in self.regions:
            if r.sample == sample:
                m[r.pixels] = True
        return m


def _clipped_area(x: np.ndarray, y: np.ndarray, x_max: float) -> float:
    """Trapezoid area under the polyline ``(x, y)`` restricted to ``[0, x_max]``."""
    x0, x1, y0, y1 = x[:-1], x[1:], y[:-1], y[1:]
    live = x0 < x_max
    x0, x1, y0, y1 = x0[live], x1[live], y0[live], y1[live]
    over = x1 > x_max
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(over, (x_max - x0) / np.where(x1 > x0, x1 - x0, 1.0), 1.0)
    y1c = np.where(over, y0 + frac * (y1 - y0), y1)
    x1c = np.where(over, x_max, x1)
    return float(np.sum((x1c - x0) * (y0 + y1c) / 2.0))


def spro_curve(maps, gt: RegionGroundTruth):
    """``(fpr, overlap)`` points for thresholds descending from +inf to -inf."""
    maps = [np.asarray(m, dtype=np.float64).ravel() for m in maps]
    if not gt.regions:
        raise UndefinedMetricError("sPRO needs at least one defect region")
    scores = np.concatenate(maps)
    offsets = np.cumsum([0] + [m.size for m in maps])
    normal = np.ones(scores.size, dtype=bool)
    inc = np.zeros(scores.size)
    n_regions = len(gt.regions)
    for r in gt.regions:
        idx = offsets[r.sample] + r.pixels
        normal[idx] = False
        # k-th best pixel of a region adds (min(k, s) - min(k-1, s)) / s
        order = idx[np.argsort(-scores[idx], kind="stable")]
        k = np.arange(1, order.size + 1, dtype=np.float64)
        inc[order] = (np.minimum(k, r.saturation) - np.minimum(k - 1, r.saturation)) / r.saturation
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("sPRO needs normal pixels to measure false positives")
    inc /= n_regions
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    cum_fp = np.cumsum(normal[order])
    cum_ov = np.cumsum(inc[order])
    # keep the last position of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fpr = np.r_[0.0, cum_fp[ends] / n_normal]
    ov = np.r_[0.0, np.minimum(cum_ov[ends], 1.0)]
    return fpr, ov


def spro(maps, gt: RegionGroundTruth, fpr_max: float = 0.05) -> float:
    """Normalised area under the saturated per-region overlap curve up to ``fpr_max``."""
    if not 0 < fpr_max <= 1:
        raise ValueError(f"fpr_max must be in (0, 1], got {fpr_max}")
    fpr, ov = spro_curve(maps, gt)
    return _clipped_area(fpr, ov, fpr_max) / fpr_max


def spro_area(maps, gt: RegionGroundTruth, fpr_max: float) -> float:
    """Unnormalised integral (used for the monotonicity property)."""
    fpr, ov = spro_curve(maps, gt)
    return _clipped_area(fpr, ov, fpr_max)
