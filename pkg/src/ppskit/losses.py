"""Supervision terms with analytic gradients, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

DICE_SMOOTH = 1.0


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambda_obj: float = 1.0
    lambda_pt: float = 1.0
    # balance between the two mask terms inside each level
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_obj", "lambda_pt", "ce_weight", "dice_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_loss(probs, target, squared: bool = False) -> LossValue:
    """``1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)``; ``squared`` uses p^2, g^2 in the denominator."""
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    _same_shape(p, g)
    num = 2.0 * np.sum(p * g) + DICE_SMOOTH
    if squared:
        den = np.sum(p * p) + np.sum(g * g) + DICE_SMOOTH
        dden = 2.0 * p
    else:
        den = np.sum(p) + np.sum(g) + DICE_SMOOTH
        dden = np.ones_like(p)
    grad = -(2.0 * g * den - num * dden) / (den * den)
    return LossValue(float(1.0 - num / den), grad)


def bce_mask_loss(logits, target) -> LossValue:
    """Mean sigmoid cross-entropy over pixels, in the stable form."""
    x = np.asarray(logits, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    _same_shape(x, g)
    n = max(x.size, 1)
    per_pixel = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    return LossValue(float(per_pixel.sum() / n), (expit(x) - g) / n)


def class_ce_loss(logits, target_class: int) -> LossValue:
    x = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_class < x.shape[-1]:
        raise ValueError(f"target class {target_class} outside 0..{x.shape[-1] - 1}")
    grad = softmax(x)
    grad[target_class] -= 1.0
    return LossValue(float(-log_softmax(x)[target_class]), grad)


def total_loss(l_obj: float, l_pt: float, w: LossWeights = LossWeights()) -> float:
    if not (np.isfinite(l_obj) and np.isfinite(l_pt)):
        raise ValueError("losses must be finite")
    return w.lambda_obj * l_obj + w.lambda_pt * l_pt


def deep_supervision_sum(per_layer_losses: Sequence[float]) -> float:
    losses = list(per_layer_losses)
    if not losses:
        raise ValueError("need at least one decoder layer loss")
    return float(sum(losses))


def prob_to_logit(p, eps: float = 1e-7) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def mask_loss(prob, target, w: LossWeights = LossWeights()) -> float:
    """CE + Dice for one mask given as probabilities."""
    return (w.ce_weight * bce_mask_loss(prob_to_logit(prob), target).value
            + w.dice_weight * dice_loss(prob, target).value)


def pps_loss(preds, gt, t, match_weights=None, loss_weights: LossWeights = LossWeights()) -> dict:
    """Object- and part-level losses for one image after bipartite matching.

    Every query gets a class cross-entropy (unmatched ones against
    "no object"); matched queries get mask losses against their ground-truth
    object mask, and part losses for every part class compatible with the
    ground-truth class (an absent part supervises an empty mask). Returns
    ``{"obj", "pt", "total", "assignment"}``.
    """
    from .matcher import MatchCostWeights, match_queries

    assignment = match_queries(preds, gt.segments, match_weights or MatchCostWeights())
    target = {q: g for q, g in assignment.pairs}
    no_object = t.no_object_index
    cls = 0.0
    for i, p in enumerate(preds):
        c = gt.segments[target[i]].object_class if i in target else no_object
        cls += class_ce_loss(np.log(np.clip(p.class_scores, 1e-12, None)), c).value
    cls /= max(len(preds), 1)
    masks = 0.0
    parts = 0.0
    n_parts = 0
    for qi, gi in assignment.pairs:
        g = gt.segments[gi]
        masks += mask_loss(preds[qi].object_mask_prob, g.mask, loss_weights)
        gt_parts = {p.part_class: p.mask for p in g.parts}
        for k in t.object_class(g.object_class).part_class_ids:
            if k not in preds[qi].part_mask_prob:
                continue
            parts += mask_loss(preds[qi].part_mask_prob[k], gt_parts.get(k, np.zeros_like(g.mask)), loss_weights)
            n_parts += 1
    l_obj = cls + masks / max(len(assignment.pairs), 1)
    l_pt = parts / max(n_parts, 1)
    return {"obj": l_obj, "pt": l_pt, "total": total_loss(l_obj, l_pt, loss_weights), "assignment": assignment}
