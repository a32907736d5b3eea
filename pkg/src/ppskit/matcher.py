"""Bipartite matching between predictions and ground truth.

``hungarian`` solves the (rectangular) linear assignment problem with the
shortest-augmenting-path form of Kuhn-Munkres, then picks, among all
optimal assignments, the one whose pair list is lexicographically smallest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import DICE_SMOOTH, dice_loss

EPS = 1e-7


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_targets: tuple[int, ...] = ()
    cost: float = 0.0

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass(frozen=True)
class MatchCostWeights:
    w_class: float = 2.0
    w_ce_mask: float = 5.0
    w_dice: float = 5.0

    def __post_init__(self):
        if min(self.w_class, self.w_ce_mask, self.w_dice) < 0:
            raise ValueError("cost weights must be non-negative")


def _solve_square(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost perfect matching on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``u[i] + v[j] <= a[i, j]`` with
    equality on matched edges.
    """
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)     # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lex_smallest(match: np.ndarray, tight: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching within the tight-edge graph.

    Every optimal assignment uses only edges with zero reduced cost, so this
    is the lexicographically smallest optimal assignment.
    """
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    for r in range(n):
        for j in adj[r]:
            if j >= match[r]:
                break
            start = owner[j]
            if start < r:
                continue
            # alternating path from the row holding j to column match[r], avoiding rows < r and r itself
            target = match[r]
            parent: dict[int, tuple[int, int]] = {start: (-1, -1)}
            queue = [start]
            found = -1
            while queue and found < 0:
                nxt = []
                for x in queue:
                    for c in adj[x]:
                        if c == j:
                            continue
                        if c == target:
                            found = x
                            last_col = c
                            break
                        y = owner[c]
                        if y <= r or y in parent:
                            continue
                        parent[y] = (x, c)
                        nxt.append(y)
                    if found >= 0:
                        break
                queue = nxt
            if found < 0:
                continue
            # shift columns along the path, then give j to r
            x, c = found, last_col
            while x != -1:
                prev_x, prev_c = parent[x]
                match[x] = c
                owner[c] = x
                x, c = prev_x, prev_c
            match[r] = j
            owner[j] = r
            break
    return match


def hungarian(cost) -> Assignment:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    rows, cols = c.shape
    if rows == 0 or cols == 0:
        return Assignment((), tuple(range(rows)), tuple(range(cols)), 0.0)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    n = max(rows, cols)
    # dummy rows/columns are constant, so their value cannot change the argmin
    square = np.zeros((n, n))
    square[:rows, :cols] = c
    match, u, v = _solve_square(square)
    scale = max(1.0, float(np.max(np.abs(c))))
    tight = (square - u[:, None] - v[None, :]) <= 1e-9 * scale * n
    tight[np.arange(n), match] = True
    match = _lex_smallest(match, tight)
    pairs = tuple((i, int(match[i])) for i in range(rows) if match[i] < cols)
    matched_cols = {j for _, j in pairs}
    total = float(sum(c[i, j] for i, j in pairs))
    return Assignment(
        pairs,
        tuple(i for i in range(rows) if match[i] >= cols),
        tuple(j for j in range(cols) if j not in matched_cols),
        total,
    )


def _mask_terms(probs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise mean BCE and Dice loss between prob rows and binary target rows."""
    p = np.clip(probs, EPS, 1.0 - EPS)
    g = targets.astype(np.float64)
    n = max(p.shape[1], 1)
    ce = -(np.log(p) @ g.T + np.log1p(-p) @ (1.0 - g).T) / n
    inter = probs @ g.T
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (probs.sum(1)[:, None] + g.sum(1)[None, :] + DICE_SMOOTH)
    return ce, dice


def match_cost(pred, gt, w: MatchCostWeights = MatchCostWeights()) -> float:
    """Cost of assigning one query prediction to one ground-truth object."""
    if pred.object_mask_prob.shape != gt.mask.shape:
        raise ValueError("prediction and ground truth canvases differ")
    prob = np.asarray(pred.object_mask_prob, dtype=np.float64)
    g = gt.mask.astype(np.float64)
    p = np.clip(prob, EPS, 1.0 - EPS)
    ce = float(-np.mean(g * np.log(p) + (1.0 - g) * np.log1p(-p)))
    dice = dice_loss(prob, g).value
    return -w.w_class * float(pred.class_scores[gt.object_class]) + w.w_ce_mask * ce + w.w_dice * dice


def cost_matrix(preds, gts, w: MatchCostWeights = MatchCostWeights()) -> np.ndarray:
    if not len(preds) or not len(gts):
        return np.zeros((len(preds), len(gts)))
    probs = np.stack([p.object_mask_prob.ravel() for p in preds]).astype(np.float64)
    targets = np.stack([g.mask.ravel() for g in gts])
    if probs.shape[1] != targets.shape[1]:
        raise ValueError("prediction and ground truth canvases differ")
    scores = np.stack([p.class_scores for p in preds])
    classes = np.array([g.object_class for g in gts])
    ce, dice = _mask_terms(probs, targets)
    return -w.w_class * scores[:, classes] + w.w_ce_mask * ce + w.w_dice * dice


def match_queries(preds, gts, w: MatchCostWeights = MatchCostWeights()) -> Assignment:
    """Match query predictions to ground-truth objects; unmatched queries learn "no object"."""
    return hungarian(cost_matrix(preds, gts, w))


def match_parts_per_object(
    dyn_preds: Sequence,
    gt_parts: Sequence,
    w: MatchCostWeights = MatchCostWeights(),
    parent_mask: np.ndarray | None = None,
) -> Assignment:
    """Match dynamic part queries to the ground-truth parts of one object.

    With ``parent_mask`` the mask terms are computed over the parent
    object's pixels only. Unmatched queries are supervised as "no part".
    """
    if not len(dyn_preds) or not len(gt_parts):
        return hungarian(np.zeros((len(dyn_preds), len(gt_parts))))
    sel = np.ones(dyn_preds[0].mask_prob.size, dtype=bool) if parent_mask is None else parent_mask.ravel()
    probs = np.stack([d.mask_prob.ravel()[sel] for d in dyn_preds]).astype(np.float64)
    targets = np.stack([g.mask.ravel()[sel] for g in gt_parts])
    scores = np.stack([d.class_scores for d in dyn_preds])
    classes = np.array([g.part_class - 1 for g in gt_parts])
    ce, dice = _mask_terms(probs, targets)
    return hungarian(-w.w_class * scores[:, classes] + w.w_ce_mask * ce + w.w_dice * dice)
