"""Exact evaluation metrics: AUROC, pixel AUROC, and the PRO curve.

Computations are rank/count based, with no quantization: threshold
sweeps visit the full set of unique heatmap values (a 256-bin fast path
exists for large inputs but is off by default).  Ground-truth regions
use 8-connectivity with deterministic scanline label order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, ParameterError


def auroc(scores, positives) -> float:
    """Rank-based AUROC: P(score_pos > score_neg) + 0.5 P(tie).

    ``positives`` is a boolean mask selecting the positive class.  Ties
    are handled with midranks, so equal scores across both classes give
    exactly 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ParameterError(f"scores/positives shape mismatch: {scores.shape} vs {positives.shape}")
    n_pos = int(positives.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: one class is absent")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[positives].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(heatmaps, masks) -> float:
    """AUROC over the pooled pixels of all images; anomalous pixels positive."""
    flat_scores = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    flat_masks = np.concatenate([np.asarray(m).astype(bool).ravel() for m in masks])
    if not flat_masks.any():
        raise MetricError("pixel AUROC undefined: no anomalous pixel in ground truth")
    return auroc(flat_scores, flat_masks)


def connected_components(mask) -> tuple:
    """8-connected labeling of a binary mask.

    Returns ``(labels, count)`` where labels are int32, 0 = background,
    and region ids are assigned in scanline order of first occurrence.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ParameterError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent: list = [0]

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    for i in range(h):
        row = mask[i]
        for j in range(w):
            if not row[j]:
                continue
            neighbors = []
            if j > 0 and mask[i, j - 1]:
                neighbors.append(labels[i, j - 1])
            if i > 0:
                if mask[i - 1, j]:
                    neighbors.append(labels[i - 1, j])
                if j > 0 and mask[i - 1, j - 1]:
                    neighbors.append(labels[i - 1, j - 1])
                if j + 1 < w and mask[i - 1, j + 1]:
                    neighbors.append(labels[i - 1, j + 1])
            if not neighbors:
                labels[i, j] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lo = min(neighbors)
                labels[i, j] = lo
                for nb in neighbors:
                    union(lo, int(nb))
    # second pass: resolve unions, then relabel compactly in scanline order
    remap: dict = {}
    count = 0
    for i in range(h):
        for j in range(w):
            if labels[i, j]:
                root = find(int(labels[i, j]))
                if root not in remap:
                    count += 1
                    remap[root] = count
                labels[i, j] = remap[root]
    return labels, count


def pro_curve(heatmaps, masks, fpr_limit: float = 0.3):
    """Per-region-overlap curve integrated up to an FPR cap.

    Regions are the 8-connected components of every ground-truth mask,
    pooled across images.  For each threshold in the descending sweep of
    the pooled unique heatmap values, the curve point is (global FPR over
    anomaly-free pixels, mean per-region overlap).  The area under the
    piecewise-linear curve up to ``fpr_limit`` is normalized by the
    limit, so a detector that finds every region before any false
    positive scores 1.

    Returns ``(fprs, pros, normalized_area)``; the first curve point is
    the empty prediction (0, 0).
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ParameterError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if len(heatmaps) != len(masks) or not heatmaps:
        raise ParameterError("need equally many heatmaps and masks")
    region_values = []  # sorted heatmap values inside each region
    negative_values = []
    for hm, mk in zip(heatmaps, masks):
        hm = np.asarray(hm, dtype=np.float64)
        mk = np.asarray(mk).astype(bool)
        if hm.shape != mk.shape:
            raise ParameterError(f"heatmap {hm.shape} vs mask {mk.shape}")
        labels, count = connected_components(mk)
        for r in range(1, count + 1):
            region_values.append(np.sort(hm[labels == r]))
        negative_values.append(hm[~mk])
    if not region_values:
        raise MetricError("PRO undefined: no ground-truth region")
    negatives = np.sort(np.concatenate(negative_values))
    if negatives.size == 0:
        raise MetricError("PRO undefined: no anomaly-free pixel")

    thresholds = np.unique(np.concatenate([np.concatenate([v for v in region_values]), negatives]))[::-1]
    # overlap(t) = fraction of region pixels >= t, averaged over regions
    overlaps = np.zeros(thresholds.size)
    for vals in region_values:
        # vals sorted ascending; count of >= t via searchsorted
        counts = vals.size - np.searchsorted(vals, thresholds, side="left")
        overlaps += counts / vals.size
    overlaps /= len(region_values)
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    fprs = fp / negatives.size

    fprs = np.concatenate([[0.0], fprs])
    pros = np.concatenate([[0.0], overlaps])
    area = _clipped_trapezoid(fprs, pros, fpr_limit)
    return fprs, pros, area / fpr_limit


def _clipped_trapezoid(xs: np.ndarray, ys: np.ndarray, x_max: float) -> float:
    """Trapezoidal area under the polyline, clipped at x = x_max."""
    area = 0.0
    for i in range(1, xs.size):
        x0, x1 = xs[i - 1], xs[i]
        y0, y1 = ys[i - 1], ys[i]
        if x0 >= x_max:
            break
        if x1 > x_max:
            # interpolate the crossing point
            t = (x_max - x0) / (x1 - x0)
            x1 = x_max
            y1 = y0 + t * (y1 - y0)
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return float(area)


@dataclass
class EvalRow:
    category: str
    fold: int
    image_auroc: float
    pixel_auroc: float
    pro_30: float
    variant: str = ""


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    CSV_COLUMNS = ("category", "fold", "image_auroc", "pixel_auroc", "pro_30", "variant")

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def variants(self):
        return sorted({r.variant for r in self.rows})

    def aggregate(self, variant: str = None) -> dict:
        """Mean and standard error of the mean per metric across rows."""
        rows = [r for r in self.rows if variant is None or r.variant == variant]
        if not rows:
            raise MetricError(f"no rows for variant {variant!r}")
        out = {}
        for name in ("image_auroc", "pixel_auroc", "pro_30"):
            vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
            sem = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            out[name] = {"mean": float(vals.mean()), "sem": sem, "n": int(vals.size)}
        return out

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for r in sorted(self.rows, key=lambda r: (r.variant, r.category, r.fold)):
            lines.append(
                f"{r.category},{r.fold},{r.image_auroc:.6f},{r.pixel_auroc:.6f},{r.pro_30:.6f},{r.variant}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "category": r.category,
                    "fold": r.fold,
                    "image_auroc": r.image_auroc,
                    "pixel_auroc": r.pixel_auroc,
                    "pro_30": r.pro_30,
                    "variant": r.variant,
                }
                for r in sorted(self.rows, key=lambda r: (r.variant, r.category, r.fold))
            ],
            "aggregate": {v: self.aggregate(v) for v in self.variants()},
        }
