"""Independent reference implementations used to check the library.

These are deliberately slow and direct: explicit per-segment boolean masks,
exhaustive permutations, central finite differences. They share no code
with the paths they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- assignment --------------------------------------------------------------

def brute_force_assignments(cost):
    """All assignments of size min(rows, cols) as sorted pair lists, with their costs."""
    c = np.asarray(cost, dtype=float)
    rows, cols = c.shape
    out = []
    if rows <= cols:
        for perm in itertools.permutations(range(cols), rows):
            pairs = tuple((i, perm[i]) for i in range(rows))
            out.append((sum(c[i, j] for i, j in pairs), pairs))
    else:
        for perm in itertools.permutations(range(rows), cols):
            pairs = tuple(sorted((perm[j], j) for j in range(cols)))
            out.append((sum(c[i, j] for i, j in pairs), pairs))
    return out


def brute_force_optimum(cost):
    """(min cost, lexicographically smallest optimal pair list)."""
    cands = brute_force_assignments(cost)
    best = min(v for v, _ in cands)
    return best, min(p for v, p in cands if v == best)


# -- gradients ---------------------------------------------------------------

def central_difference(f, x, step=1e-4):
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (f(hi) - f(lo)) / (2 * step)
    return grad


# -- evaluation --------------------------------------------------------------

def _mask_iou(a, b):
    union = np.logical_or(a, b).sum()
    return np.logical_and(a, b).sum() / union if union else 0.0


def _part_labels(seg, valid):
    """Per-pixel part id inside the segment (restricted to valid), -1 outside."""
    lab = np.full(seg.mask.shape, -1)
    inside = seg.mask & valid
    lab[inside] = 0
    for p in seg.parts:
        lab[p.mask & valid] = p.part_class
    return lab


def naive_evaluate(preds, gts, taxonomy, strict=False):
    """Reference evaluator over SegmentSets.

    Returns ``(per_class, aggregates)`` where per_class maps class id to a dict
    with tp/fp/fn/sum_iou_p/sum_iou/part_pq/part_sq/pq (scores x100).
    """
    tally = {}
    sem = {}
    things = {c.id for c in taxonomy.object_classes if c.kind == "thing"}

    def entry(c):
        return tally.setdefault(c, {"tp": 0, "fp": 0, "fn": 0, "iou_p": [], "iou": []})

    for pset, gset in zip(preds, gts):
        valid = np.zeros(gset.shape, dtype=bool)
        for g in gset.segments:
            valid |= g.mask
        live = [(i, p) for i, p in enumerate(pset.segments) if (p.mask & valid).any()]
        matched_p, matched_g = set(), set()
        for i, p in live:
            for j, g in enumerate(gset.segments):
                if p.object_class != g.object_class:
                    continue
                v = _mask_iou(p.mask & valid, g.mask)
                if v <= 0.5:
                    continue
                assert i not in matched_p and j not in matched_g, "IoU>0.5 matching is not unique"
                matched_p.add(i)
                matched_g.add(j)
                compat = taxonomy.object_class(g.object_class).part_class_ids
                if compat:
                    pl, gl = _part_labels(p, valid), _part_labels(g, valid)
                    vals = []
                    for k in list(compat) + [0]:
                        present = (pl == k).any() or (gl == k).any()
                        use = (k != 0 and (strict or present)) or (k == 0 and not strict and present)
                        if use:
                            vals.append(_mask_iou(pl == k, gl == k))
                    ioup = sum(vals) / len(vals) if vals else 0.0
                else:
                    ioup = v
                e = entry(g.object_class)
                e["tp"] += 1
                e["iou_p"].append(ioup)
                e["iou"].append(v)
        for i, p in live:
            if i not in matched_p:
                entry(p.object_class)["fp"] += 1
        for j, g in enumerate(gset.segments):
            if j not in matched_g:
                entry(g.object_class)["fn"] += 1
        for c in things:
            pm = np.zeros(gset.shape, dtype=bool)
            gm = np.zeros(gset.shape, dtype=bool)
            for p in pset.segments:
                if p.object_class == c:
                    pm |= p.mask & valid
            for g in gset.segments:
                if g.object_class == c:
                    gm |= g.mask
            s = sem.setdefault(c, [0, 0])
            s[0] += int((pm & gm).sum())
            s[1] += int((pm | gm).sum())

    per_class = {}
    for c, e in tally.items():
        if e["tp"] + e["fp"] + e["fn"] == 0:
            continue
        d = e["tp"] + e["fp"] / 2 + e["fn"] / 2
        sp, so = sum(e["iou_p"]), sum(e["iou"])
        per_class[c] = {
            "tp": e["tp"], "fp": e["fp"], "fn": e["fn"], "sum_iou_p": sp, "sum_iou": so,
            "part_pq": 100 * sp / d, "part_sq": 100 * sp / e["tp"] if e["tp"] else 0.0, "pq": 100 * so / d,
        }

    def mean(xs):
        xs = list(xs)
        return sum(xs) / len(xs) if xs else None

    def has_parts(c):
        return bool(taxonomy.object_class(c).part_class_ids)

    agg = {
        "PartPQ": mean(v["part_pq"] for v in per_class.values()),
        "PartPQ_Pt": mean(v["part_pq"] for c, v in per_class.items() if has_parts(c)),
        "PartPQ_NoPt": mean(v["part_pq"] for c, v in per_class.items() if not has_parts(c)),
        "PartSQ_Pt": mean(v["part_sq"] for c, v in per_class.items() if has_parts(c)),
        "PQ": mean(v["pq"] for v in per_class.values()),
        "PQ_Th": mean(v["pq"] for c, v in per_class.items() if c in things),
        "PQ_St": mean(v["pq"] for c, v in per_class.items() if c not in things),
        "mIoU_Th": mean(100 * i / u for c, (i, u) in sorted(sem.items()) if u),
    }
    return per_class, agg


def close(a, b, tol=1e-9):
    if a is None or b is None:
        return a is None and b is None
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)
