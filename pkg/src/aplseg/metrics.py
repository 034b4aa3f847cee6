"""Binary segmentation overlap metrics."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred > 0.5
    g = gt > 0.5
    tp = float(np.sum(p & g))
    fp = float(np.sum(p & ~g))
    fn = float(np.sum(~p & g))
    return tp, fp, fn


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2TP/(2TP+FP+FN); two empty masks count as agreement."""
    tp, fp, fn = _counts(pred, gt)
    denom = 2.0 * tp + fp + fn
    return 1.0 if denom == 0.0 else 2.0 * tp / denom


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Jaccard overlap TP/(TP+FP+FN); two empty masks count as agreement."""
    tp, fp, fn = _counts(pred, gt)
    denom = tp + fp + fn
    return 1.0 if denom == 0.0 else tp / denom


def as_percent(x: float) -> float:
    """Score in [0,1] -> percentage rounded to two decimals."""
    return round(100.0 * x, 2)
