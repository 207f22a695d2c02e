"""Segmentation metrics and the soft Jaccard loss.

J mean and mIoU are both the arithmetic mean of per-image IoU here; for
per-image evaluation the two coincide. F mean is the boundary F-measure with
a Chebyshev pixel tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import MetricError

JACCARD_EPS = 1e-6


def _as_mask(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4 and a.shape[0] == 1 and a.shape[3] == 1:
        a = a[0, :, :, 0]
    if a.ndim != 2:
        raise MetricError(f"{name} must be a 2-D mask, got shape {a.shape}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise MetricError(f"{name} values must lie in [0, 1]")
    return a


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_mask(pred, "prediction"), _as_mask(gt, "ground truth")
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(mask) >= threshold


def iou(pred, gt, threshold: float = 0.5) -> float:
    """Intersection over union after thresholding ``pred``; empty vs empty is 1.0."""
    pred, gt = _pair(pred, gt)
    p, g = binarize(pred, threshold), binarize(gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def j_mean(pairs: Iterable[tuple], threshold: float = 0.5) -> float:
    values = [iou(p, g, threshold) for p, g in pairs]
    if not values:
        raise MetricError("J mean of an empty set")
    return math.fsum(values) / len(values)


miou = j_mean


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (outside counts as background)."""
    m = binarize(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def default_tolerance(shape: Sequence[int]) -> int:
    return int(round(0.008 * math.hypot(*shape[:2])))


def _dilate(b: np.ndarray, tolerance: int) -> np.ndarray:
    if tolerance <= 0:
        return b
    return ndimage.binary_dilation(b, structure=np.ones((2 * tolerance + 1,) * 2, dtype=bool))


def boundary_precision_recall(pred, gt, tolerance_px: int | None = None) -> tuple[float, float]:
    pred, gt = _pair(pred, gt)
    tol = default_tolerance(pred.shape) if tolerance_px is None else int(tolerance_px)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    precision = np.count_nonzero(bp & _dilate(bg, tol)) / n_p if n_p else 0.0
    recall = np.count_nonzero(bg & _dilate(bp, tol)) / n_g if n_g else 0.0
    return precision, recall


def f_measure(pred, gt, tolerance_px: int | None = None) -> float:
    """Boundary F-measure of one mask pair.

    Both boundaries empty gives 1.0; exactly one empty gives 0.0.
    """
    pred, gt = _pair(pred, gt)
    n_p, n_g = np.count_nonzero(boundary(pred)), np.count_nonzero(boundary(gt))
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    p, r = boundary_precision_recall(pred, gt, tolerance_px)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f_mean(pairs: Iterable[tuple], tolerance_px: int | None = None) -> float:
    values = [f_measure(p, g, tolerance_px) for p, g in pairs]
    if not values:
        raise MetricError("F mean of an empty set")
    return math.fsum(values) / len(values)


@dataclass
class MetricsReport:
    miou: float
    j_mean: float
    f_mean: float
    per_sample: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{'sample':<24} {'iou':>8} {'f':>8}"]
        for row in self.per_sample:
            lines.append(f"{row['name']:<24} {row['iou']:8.4f} {row['f']:8.4f}")
        lines.append(f"mIoU   {self.miou:.4f}")
        lines.append(f"J mean {self.j_mean:.4f}")
        lines.append(f"F mean {self.f_mean:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(pairs: Sequence, names: Sequence[str] | None = None, threshold: float = 0.5,
             tolerance_px: int | None = None) -> MetricsReport:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("cannot evaluate an empty set of mask pairs")
    names = list(names) if names is not None else [str(i) for i in range(len(pairs))]
    rows = [
        {"name": n, "iou": iou(p, g, threshold), "f": f_measure(p, g, tolerance_px)}
        for n, (p, g) in zip(names, pairs)
    ]
    j = math.fsum(r["iou"] for r in rows) / len(rows)
    f = math.fsum(r["f"] for r in rows) / len(rows)
    return MetricsReport(miou=j, j_mean=j, f_mean=f, per_sample=rows)


# ---------------------------------------------------------------------------
# soft Jaccard loss


def _soft_terms(pred, gt, eps):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"shapes differ: {p.shape} vs {g.shape}")
    inter = np.sum(p * g)
    union = np.sum(p) + np.sum(g) - inter + eps
    return p, g, inter, union


def jaccard_loss(pred, gt, eps: float = JACCARD_EPS) -> float:
    """``1 - sum(p*g) / (sum(p) + sum(g) - sum(p*g) + eps)``."""
    _, _, inter, union = _soft_terms(pred, gt, eps)
    return float(1.0 - inter / union)


def jaccard_grad(pred, gt, eps: float = JACCARD_EPS) -> np.ndarray:
    """Closed-form derivative of :func:`jaccard_loss` with respect to each ``pred`` pixel."""
    _, g, inter, union = _soft_terms(pred, gt, eps)
    return -(g * union - inter * (1.0 - g)) / union**2
