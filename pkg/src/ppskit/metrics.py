"""Panoptic quality, its part-aware variants and instance-agnostic thing mIoU.

Conventions:

* Pixels that are void in the ground truth are ignored everywhere: they are
  removed from prediction masks before any area or IoU is computed. A
  predicted segment lying entirely in ground-truth void is ignored.
* A prediction and a ground-truth segment of the same class match when
  their object-mask IoU exceeds 0.5 (this matching is unique).
* For classes with parts, IoU_p is the mean IoU over part categories of the
  matched pair. By default the categories are the compatible part classes
  present in either segment, plus the unlabeled remainder (part id 0) when
  present in either. In strict mode every compatible part class counts
  (both-absent scores 0) and the remainder does not.
* Per-class statistics accumulate over the whole dataset; aggregates are
  unweighted means over classes seen in either predictions or ground truth.
  All scores are reported x100.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import VOID, LabelMap, ObjectSegment, SegmentSet, label_map_from_segments
from .taxonomy import Taxonomy

_VOID_KEY = VOID >> 8


class StreamMismatchError(ValueError):
    pass


def iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def _part_categories(compat, pred_area, gt_area, strict):
    """Yield the part categories entering IoU_p, given area lookups."""
    for k in compat:
        if strict or pred_area(k) or gt_area(k):
            yield k
    if not strict and (pred_area(0) or gt_area(0)):
        yield 0


def iou_p(pred: ObjectSegment, gt: ObjectSegment, t: Taxonomy, strict: bool = False) -> float:
    """Part-level mIoU of a matched pair, or object IoU for classes without parts."""
    if pred.object_class != gt.object_class:
        raise ValueError(f"class mismatch: {pred.object_class} vs {gt.object_class}")
    compat = t.object_class(gt.object_class).part_class_ids
    if not compat:
        return iou(pred.mask, gt.mask)
    pl = np.where(pred.mask, pred.part_label_map(), -1)
    gl = np.where(gt.mask, gt.part_label_map(), -1)
    cats = list(_part_categories(compat, lambda k: np.any(pl == k), lambda k: np.any(gl == k), strict))
    if not cats:
        return 0.0
    return float(np.mean([iou(pl == k, gl == k) for k in cats]))


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, object IoU)
    false_positives: list[int]
    false_negatives: list[int]


def match_for_metrics(preds: SegmentSet, gts: SegmentSet) -> MatchResult:
    """Same-class pairs with IoU > 0.5; predictions in ground-truth void are ignored."""
    if preds.shape != gts.shape:
        raise ValueError(f"canvas mismatch: {preds.shape} vs {gts.shape}")
    valid = np.zeros(gts.shape, dtype=bool)
    for g in gts.segments:
        valid |= g.mask
    pairs, matched_p, matched_g = [], set(), set()
    for i, p in enumerate(preds.segments):
        pm = p.mask & valid
        for j, g in enumerate(gts.segments):
            if p.object_class != g.object_class or j in matched_g:
                continue
            v = iou(pm, g.mask)
            if v > 0.5:
                pairs.append((i, j, v))
                matched_p.add(i)
                matched_g.add(j)
                break
    fps = [i for i, p in enumerate(preds.segments) if i not in matched_p and np.any(p.mask & valid)]
    fns = [j for j in range(len(gts.segments)) if j not in matched_g]
    return MatchResult(pairs, fps, fns)


# -- accumulation ------------------------------------------------------------

@dataclass
class ClassAccumulator:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_p: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)

    def merge(self, other: "ClassAccumulator") -> "ClassAccumulator":
        return ClassAccumulator(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                                self.iou_p + other.iou_p, self.iou + other.iou)


@dataclass
class ImageStats:
    """Per-class counts for one or more images; merging is associative and commutative."""

    classes: dict[int, ClassAccumulator] = field(default_factory=dict)
    # thing-class semantic counts: class -> [intersection, pred area, gt area]
    semantic: dict[int, list[int]] = field(default_factory=dict)
    images: int = 0

    def acc(self, c: int) -> ClassAccumulator:
        if c not in self.classes:
            self.classes[c] = ClassAccumulator()
        return self.classes[c]

    def merge(self, other: "ImageStats") -> "ImageStats":
        out = ImageStats()
        out.update(self)
        out.update(other)
        return out

    def update(self, other: "ImageStats") -> None:
        """In-place merge."""
        self.images += other.images
        for c, a in other.classes.items():
            mine = self.acc(c)
            mine.tp += a.tp
            mine.fp += a.fp
            mine.fn += a.fn
            mine.iou_p.extend(a.iou_p)
            mine.iou.extend(a.iou)
        for c, counts in other.semantic.items():
            mine = self.semantic.setdefault(c, [0, 0, 0])
            for k in range(3):
                mine[k] += counts[k]


def _as_pixels(x, t: Taxonomy) -> np.ndarray:
    if isinstance(x, LabelMap):
        return x.pixels
    if isinstance(x, SegmentSet):
        return label_map_from_segments(x, t).pixels
    return np.asarray(x, dtype=np.uint32)


def image_stats(pred, gt, t: Taxonomy, strict: bool = False) -> ImageStats:
    """Accumulate one image. ``pred``/``gt`` are LabelMaps, SegmentSets or uid arrays."""
    pr = _as_pixels(pred, t)
    gr = _as_pixels(gt, t)
    if pr.shape != gr.shape:
        raise StreamMismatchError(f"canvas mismatch: prediction {pr.shape} vs ground truth {gr.shape}")
    valid = gr != VOID
    key = (pr[valid].astype(np.uint64) << np.uint64(32)) | gr[valid].astype(np.uint64)
    keys, counts = np.unique(key, return_counts=True)
    pu = (keys >> np.uint64(32)).astype(np.int64)
    gu = (keys & np.uint64(0xFFFFFFFF)).astype(np.int64)
    counts = counts.astype(np.int64)

    pred_area: dict[int, int] = {}
    gt_area: dict[int, int] = {}
    inter: dict[tuple[int, int], int] = {}
    pred_part: dict[int, int] = {}
    gt_part: dict[int, int] = {}
    part_inter: dict[tuple[int, int], int] = {}
    for p, g, n in zip(pu.tolist(), gu.tolist(), counts.tolist()):
        po, go = p >> 8, g >> 8
        gt_area[go] = gt_area.get(go, 0) + n
        gt_part[g] = gt_part.get(g, 0) + n
        if po == _VOID_KEY:
            continue
        pred_area[po] = pred_area.get(po, 0) + n
        pred_part[p] = pred_part.get(p, 0) + n
        inter[(po, go)] = inter.get((po, go), 0) + n
        part_inter[(p, g)] = n

    stats = ImageStats(images=1)
    matched_p, matched_g = set(), set()
    for (po, go), n in sorted(inter.items()):
        if po >> 12 != go >> 12:
            continue
        union = pred_area[po] + gt_area[go] - n
        if n / union <= 0.5:
            continue
        matched_p.add(po)
        matched_g.add(go)
        cls = go >> 12
        obj_iou = n / union
        compat = t.object_class(cls).part_class_ids
        if compat:
            cats = list(_part_categories(
                compat,
                lambda k: pred_part.get((po << 8) | k, 0),
                lambda k: gt_part.get((go << 8) | k, 0),
                strict,
            ))
            vals = []
            for k in cats:
                pk, gk = (po << 8) | k, (go << 8) | k
                i = part_inter.get((pk, gk), 0)
                u = pred_part.get(pk, 0) + gt_part.get(gk, 0) - i
                vals.append(i / u if u else 0.0)
            ioup = math.fsum(vals) / len(vals) if vals else 0.0
        else:
            ioup = obj_iou
        acc = stats.acc(cls)
        acc.tp += 1
        acc.iou_p.append(ioup)
        acc.iou.append(obj_iou)
    for po in pred_area:
        if po not in matched_p:
            stats.acc(po >> 12).fp += 1
    for go in gt_area:
        if go not in matched_g:
            stats.acc(go >> 12).fn += 1

    things = set(t.thing_ids)
    for po, n in pred_area.items():
        c = po >> 12
        if c in things:
            stats.semantic.setdefault(c, [0, 0, 0])[1] += n
    for go, n in gt_area.items():
        c = go >> 12
        if c in things:
            stats.semantic.setdefault(c, [0, 0, 0])[2] += n
    for (po, go), n in inter.items():
        c = po >> 12
        if c == go >> 12 and c in things:
            stats.semantic[c][0] += n
    return stats


# -- reporting ---------------------------------------------------------------

@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    name: str
    tp: int
    fp: int
    fn: int
    sum_iou_p: float
    sum_iou: float
    part_pq: float
    part_sq: float
    pq: float
    has_parts: bool
    is_thing: bool


@dataclass(frozen=True)
class EvalReport:
    per_class: tuple[ClassMetrics, ...]
    aggregates: dict
    num_images: int
    strict: bool = False

    def __getitem__(self, key):
        return self.aggregates[key]

    def to_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "strict_ioup": self.strict,
            "aggregates": self.aggregates,
            "per_class": [asdict(c) for c in self.per_class],
        }

    def to_text(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{v:6.2f}"

        lines = [f"{'class':<24}{'TP':>6}{'FP':>6}{'FN':>6}{'PartPQ':>8}{'PartSQ':>8}{'PQ':>8}"]
        for c in self.per_class:
            lines.append(f"{c.name[:23]:<24}{c.tp:>6}{c.fp:>6}{c.fn:>6}  {fmt(c.part_pq)}  {fmt(c.part_sq)}  {fmt(c.pq)}")
        lines.append("")
        for k, v in self.aggregates.items():
            lines.append(f"{k:<14}{fmt(v)}")
        lines.append(f"{'images':<14}{self.num_images:>6}")
        return "\n".join(lines) + "\n"


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def build_report(stats: ImageStats, t: Taxonomy, strict: bool = False) -> EvalReport:
    per_class = []
    for c in sorted(stats.classes):
        a = stats.classes[c]
        if a.tp + a.fp + a.fn == 0:
            continue
        denom = a.tp + 0.5 * a.fp + 0.5 * a.fn
        s_p, s_o = math.fsum(a.iou_p), math.fsum(a.iou)
        cdef = t.object_class(c)
        per_class.append(ClassMetrics(
            class_id=c, name=cdef.name, tp=a.tp, fp=a.fp, fn=a.fn, sum_iou_p=s_p, sum_iou=s_o,
            part_pq=100.0 * s_p / denom, part_sq=100.0 * s_p / a.tp if a.tp else 0.0,
            pq=100.0 * s_o / denom, has_parts=cdef.has_parts, is_thing=cdef.is_thing,
        ))
    miou = []
    for c in sorted(stats.semantic):
        i, p, g = stats.semantic[c]
        if p + g - i > 0:
            miou.append(100.0 * i / (p + g - i))
    aggregates = {
        "PartPQ": _mean([m.part_pq for m in per_class]),
        "PartPQ_Pt": _mean([m.part_pq for m in per_class if m.has_parts]),
        "PartPQ_NoPt": _mean([m.part_pq for m in per_class if not m.has_parts]),
        "PartSQ_Pt": _mean([m.part_sq for m in per_class if m.has_parts]),
        "PQ": _mean([m.pq for m in per_class]),
        "PQ_Th": _mean([m.pq for m in per_class if m.is_thing]),
        "PQ_St": _mean([m.pq for m in per_class if not m.is_thing]),
        "mIoU_Th": _mean(miou),
    }
    return EvalReport(tuple(per_class), aggregates, stats.images, strict)


def accumulate(pairs: Iterable[tuple], t: Taxonomy, strict: bool = False, workers: int = 1,
               load: Callable | None = None) -> ImageStats:
    """Accumulate ``(pred, gt)`` pairs, optionally over a process pool.

    ``load`` maps a pair item to ``(pred, gt)`` inside the worker (used to
    read files in parallel). The result does not depend on ``workers``.
    """
    total = ImageStats()
    job = _Job(t, strict, load)
    if workers <= 1:
        for item in pairs:
            total.update(job(item))
        return total
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for s in pool.map(job, pairs, chunksize=4):
            total.update(s)
    return total


@dataclass(frozen=True)
class _Job:
    t: Taxonomy
    strict: bool
    load: Callable | None

    def __call__(self, item):
        pred, gt = self.load(item) if self.load else item
        return image_stats(pred, gt, self.t, self.strict)


def evaluate(preds: Sequence, gts: Sequence, t: Taxonomy, strict: bool = False, workers: int = 1) -> EvalReport:
    """Evaluate aligned prediction/ground-truth streams (SegmentSets or LabelMaps)."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise StreamMismatchError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    return build_report(accumulate(zip(preds, gts), t, strict, workers), t, strict)


def miou_things(preds: Sequence, gts: Sequence, t: Taxonomy) -> float | None:
    return evaluate(preds, gts, t).aggregates["mIoU_Th"]
