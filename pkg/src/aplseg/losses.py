"""Training objective: class-balanced cross-entropy plus a soft IoU term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossTerms:
    l_bce: float
    l_iou: float
    total: float
    alpha: float
    beta: float


def balanced_bce(p: Tensor, gt: np.ndarray, alpha: float, beta: float) -> Tensor:
    """-mean(alpha * gt * log p + beta * (1-gt) * log(1-p))."""
    if p.shape != gt.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs ground truth {gt.shape}")
    gt_t = Tensor(gt)
    pos = T.mul(T.mul(gt_t, T.log(p)), alpha)
    neg = T.mul(T.mul(Tensor(1.0 - gt), T.log(1.0 - p)), beta)
    return T.neg(T.mean(T.add(pos, neg)))


def soft_iou_loss(p: Tensor, gt: np.ndarray) -> Tensor:
    """1 - sum(p*gt) / (sum(p) + sum(gt) - sum(p*gt)); empty-vs-empty is 0."""
    if p.shape != gt.shape:
        raise ShapeMismatch(f"probabilities {p.shape} vs ground truth {gt.shape}")
    inter = T.total(T.mul(p, Tensor(gt)))
    union = T.sub(T.add(T.total(p), float(gt.sum())), inter)
    if union.data == 0.0:
        return Tensor(0.0)
    return T.sub(Tensor(np.asarray(1.0)), T.div(inter, union))


def episode_loss(logits: Tensor, gt: np.ndarray,
                 alpha: float | None = None,
                 beta: float | None = None) -> tuple[Tensor, LossTerms]:
    """Total loss for one query prediction.

    Balancing defaults are the per-episode class frequencies swapped
    (alpha = background fraction weights the foreground term), which keeps
    sparse foregrounds from being drowned out.
    """
    if logits.ndim == 3 and logits.shape[0] == 1:
        logits = T.reshape(logits, logits.shape[1:])
    if logits.shape != gt.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs ground truth {gt.shape}")
    n = gt.size
    n_fg = float(gt.sum())
    if alpha is None:
        alpha = (n - n_fg) / n
    if beta is None:
        beta = n_fg / n
    p = T.clamp(T.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    l_bce = balanced_bce(p, gt, alpha, beta)
    l_iou = soft_iou_loss(p, gt)
    total = T.add(l_bce, l_iou)
    terms = LossTerms(l_bce=float(l_bce.data), l_iou=float(l_iou.data),
                      total=float(total.data), alpha=alpha, beta=beta)
    return total, terms
