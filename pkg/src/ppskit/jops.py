"""Joint object-and-part head: forward math and inference-time assembly.

The head turns processed queries ``Q`` (``Nq x E``) and pixel features ``F``
(``E x H x W``) into a class distribution (object classes plus "no object")
and an object mask per query. Part masks come from part queries, produced by
a shared adaptation MLP followed by one fixed affine map per part class. In
``constrained`` mode only the parts compatible with the query's predicted
object class are computed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from .model import ObjectSegment, PartSegment, SegmentSet
from .taxonomy import STUFF, Taxonomy

log = logging.getLogger(__name__)

CONSTRAINED = "constrained"
UNCONSTRAINED = "unconstrained"
MODES = (CONSTRAINED, UNCONSTRAINED)

Affine = tuple[np.ndarray, np.ndarray]


class ConstrainedInputError(ValueError):
    """Conflict statistics requested on constrained predictions (vacuously 1.0)."""


@dataclass(frozen=True)
class QueryBundle:
    queries: np.ndarray   # (Nq, E)
    features: np.ndarray  # (E, H, W)

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.queries.shape[1]


@dataclass(frozen=True)
class HeadWeights:
    """Affine maps ``y = W @ x + b`` making up the head.

    ``part_weight[k - 1]`` / ``part_bias[k - 1]`` belong to part class ``k``.
    """

    class_weight: np.ndarray            # (C+1, E)
    class_bias: np.ndarray              # (C+1,)
    mask_mlp: tuple[Affine, ...]        # 3 layers E -> E
    adapt_mlp: tuple[Affine, ...]       # 0-3 layers E -> E
    part_weight: np.ndarray             # (Npc, E, E)
    part_bias: np.ndarray               # (Npc, E)

    @property
    def embed_dim(self) -> int:
        return self.class_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_weight.shape[0] - 1

    @property
    def num_parts(self) -> int:
        return self.part_weight.shape[0]

    def check(self, t: Taxonomy | None = None) -> None:
        e = self.embed_dim
        if self.class_bias.shape != (self.num_classes + 1,):
            raise ValueError("class_bias shape disagrees with class_weight")
        if len(self.mask_mlp) != 3:
            raise ValueError(f"mask MLP must have 3 layers, got {len(self.mask_mlp)}")
        if not 0 <= len(self.adapt_mlp) <= 3:
            raise ValueError(f"adaptation MLP depth must be 0-3, got {len(self.adapt_mlp)}")
        for name, layers in (("mask_mlp", self.mask_mlp), ("adapt_mlp", self.adapt_mlp)):
            for i, (w, b) in enumerate(layers):
                if w.shape != (e, e) or b.shape != (e,):
                    raise ValueError(f"{name}[{i}] must map {e} -> {e}, got {w.shape}/{b.shape}")
        if self.part_weight.shape[1:] != (e, e) or self.part_bias.shape != (self.num_parts, e):
            raise ValueError("part projection shapes disagree with embedding dim")
        arrays = [self.class_weight, self.class_bias, self.part_weight, self.part_bias]
        arrays += [a for layer in self.mask_mlp + self.adapt_mlp for a in layer]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("head weights contain non-finite values")
        if t is not None:
            if self.num_classes != t.num_object_classes:
                raise ValueError(f"class head has {self.num_classes} classes, taxonomy {t.num_object_classes}")
            if self.num_parts != t.num_part_classes:
                raise ValueError(f"{self.num_parts} part projections, taxonomy has {t.num_part_classes} parts")

    @classmethod
    def zeros(cls, embed_dim: int, num_classes: int, num_parts: int, adapt_depth: int = 2) -> "HeadWeights":
        e = embed_dim
        layer = lambda: (np.zeros((e, e)), np.zeros(e))  # noqa: E731
        return cls(
            np.zeros((num_classes + 1, e)), np.zeros(num_classes + 1),
            tuple(layer() for _ in range(3)), tuple(layer() for _ in range(adapt_depth)),
            np.zeros((num_parts, e, e)), np.zeros((num_parts, e)),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, embed_dim: int, num_classes: int, num_parts: int,
               adapt_depth: int = 2, scale: float = 1.0) -> "HeadWeights":
        e = embed_dim
        s = scale / np.sqrt(e)
        layer = lambda: (rng.normal(0, s, (e, e)), rng.normal(0, s, e))  # noqa: E731
        return cls(
            rng.normal(0, s, (num_classes + 1, e)), rng.normal(0, s, num_classes + 1),
            tuple(layer() for _ in range(3)), tuple(layer() for _ in range(adapt_depth)),
            rng.normal(0, s, (num_parts, e, e)), rng.normal(0, s, (num_parts, e)),
        )


@dataclass(frozen=True, eq=False)
class QueryPrediction:
    class_scores: np.ndarray                      # (C+1,), last entry is "no object"
    object_mask_prob: np.ndarray                  # (H, W)
    part_mask_prob: dict[int, np.ndarray] = field(default_factory=dict)
    mode: str | None = None

    @property
    def object_class(self) -> int | None:
        """Argmax over all classes, or None when "no object" wins."""
        c = int(np.argmax(self.class_scores))
        return None if c == len(self.class_scores) - 1 else c

    @property
    def score(self) -> float:
        return float(np.max(self.class_scores))


@dataclass(frozen=True)
class AssemblyConfig:
    class_confidence_threshold: float = 0.8
    mask_overlap_threshold: float = 0.8
    mode: str = CONSTRAINED

    def __post_init__(self):
        for name in ("class_confidence_threshold", "mask_overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def _mlp(x: np.ndarray, layers: Sequence[Affine]) -> np.ndarray:
    for i, (w, b) in enumerate(layers):
        x = x @ w.T + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def head_forward(b: QueryBundle, w: HeadWeights, t: Taxonomy, mode: str = CONSTRAINED) -> list[QueryPrediction]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    w.check(t)
    q = np.asarray(b.queries, dtype=np.float64)
    f = np.asarray(b.features, dtype=np.float64)
    if q.ndim != 2 or f.ndim != 3 or q.shape[1] != w.embed_dim or f.shape[0] != w.embed_dim:
        raise ValueError(f"dimension mismatch: queries {q.shape}, features {f.shape}, E={w.embed_dim}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(f))):
        raise ValueError("queries/features contain non-finite values")

    scores = softmax(q @ w.class_weight.T + w.class_bias, axis=1)
    mask_embed = _mlp(q, w.mask_mlp)
    obj_prob = expit(np.einsum("qe,ehw->qhw", mask_embed, f))
    adapted = _mlp(q, w.adapt_mlp)

    no_object = w.num_classes
    preds = []
    for i in range(q.shape[0]):
        if mode == UNCONSTRAINED:
            part_ids = range(1, w.num_parts + 1)
        else:
            c = int(np.argmax(scores[i]))
            part_ids = () if c == no_object else t.object_class(c).part_class_ids
        idx = np.array(part_ids, dtype=np.int64) - 1
        parts: dict[int, np.ndarray] = {}
        if idx.size:
            part_queries = np.einsum("kfe,e->kf", w.part_weight[idx], adapted[i]) + w.part_bias[idx]
            probs = expit(np.einsum("ke,ehw->khw", part_queries, f))
            parts = {int(k): probs[j] for j, k in enumerate(part_ids)}
        preds.append(QueryPrediction(scores[i], obj_prob[i], parts, mode))
    return preds


def assemble_panoptic(
    preds: Sequence[QueryPrediction],
    cfg: AssemblyConfig,
    t: Taxonomy,
    *,
    return_sources: bool = False,
):
    """Turn per-query predictions into a panoptic SegmentSet (no parts).

    Queries whose argmax is "no object" or whose top score is below the
    class threshold are dropped. Each pixel goes to the surviving query with
    the largest ``score * mask_prob`` (lowest index on ties), provided that
    query's mask probability exceeds 0.5 there. A query whose kept area is
    too small a fraction of its own ``prob > 0.5`` area is dropped. Stuff
    queries of one class are merged.

    With ``return_sources`` also returns, per segment, the tuple of query
    indices it came from (first entry is the representative query).
    """
    preds = list(preds)
    if not preds:
        empty = SegmentSet(0, 0, ())
        return (empty, []) if return_sources else empty
    shape = preds[0].object_mask_prob.shape
    if any(p.object_mask_prob.shape != shape for p in preds):
        raise ValueError("predictions do not share one canvas")

    kept = [i for i, p in enumerate(preds)
            if p.object_class is not None and p.score >= cfg.class_confidence_threshold]
    segments: list[ObjectSegment] = []
    sources: list[list[int]] = []
    if kept:
        probs = np.stack([preds[i].object_mask_prob for i in kept])
        weights = np.array([preds[i].score for i in kept])
        winner = np.argmax(probs * weights[:, None, None], axis=0)
        stuff_slot: dict[int, int] = {}
        next_instance: dict[int, int] = {}
        for j, qi in enumerate(kept):
            own = probs[j] > 0.5
            mask = (winner == j) & own
            own_area = int(np.count_nonzero(own))
            area = int(np.count_nonzero(mask))
            if own_area == 0 or area == 0 or area / own_area < cfg.mask_overlap_threshold:
                continue
            cls = preds[qi].object_class
            if t.object_class(cls).kind == STUFF:
                if cls in stuff_slot:
                    k = stuff_slot[cls]
                    old = segments[k]
                    segments[k] = ObjectSegment(cls, 0, old.mask | mask)
                    sources[k].append(qi)
                    continue
                stuff_slot[cls] = len(segments)
                inst = 0
            else:
                inst = next_instance.get(cls, 0)
                next_instance[cls] = inst + 1
            segments.append(ObjectSegment(cls, inst, mask))
            sources.append([qi])
    out = SegmentSet(shape[0], shape[1], tuple(segments))
    if return_sources:
        return out, [tuple(s) for s in sources]
    return out


def _part_argmax(probs: dict[int, np.ndarray], part_ids: Sequence[int], region: np.ndarray) -> np.ndarray:
    """Winning part id per pixel inside ``region`` (0 where the winner is <= 0.5)."""
    ids = sorted(part_ids)
    stack = np.stack([probs[k] for k in ids])
    win = np.argmax(stack, axis=0)
    best = np.take_along_axis(stack, win[None], axis=0)[0]
    labels = np.asarray(ids, dtype=np.int32)[win]
    labels[(best <= 0.5) | ~region] = 0
    return labels


def _parts_from_labels(labels: np.ndarray) -> tuple[PartSegment, ...]:
    return tuple(PartSegment(int(k), labels == k) for k in np.unique(labels) if k != 0)


def assemble_parts(objects: SegmentSet, preds: Sequence[QueryPrediction], t: Taxonomy) -> SegmentSet:
    """Fill each object with its compatible parts via a per-pixel argmax."""
    if len(preds) != len(objects.segments):
        raise ValueError(f"{len(preds)} predictions for {len(objects.segments)} objects")
    out = []
    for seg, pred in zip(objects.segments, preds):
        compat = t.object_class(seg.object_class).part_class_ids
        if not compat:
            out.append(ObjectSegment(seg.object_class, seg.instance_index, seg.mask))
            continue
        missing = [k for k in compat if k not in pred.part_mask_prob]
        if missing:
            raise ValueError(f"object class {seg.object_class}: missing part maps for {missing}")
        labels = _part_argmax(pred.part_mask_prob, compat, seg.mask)
        out.append(ObjectSegment(seg.object_class, seg.instance_index, seg.mask, _parts_from_labels(labels)))
    return SegmentSet(objects.height, objects.width, tuple(out))


def assemble_pps(preds: Sequence[QueryPrediction], t: Taxonomy, cfg: AssemblyConfig | None = None) -> SegmentSet:
    """Panoptic assembly followed by part assembly."""
    cfg = cfg or AssemblyConfig()
    objects, sources = assemble_panoptic(preds, cfg, t, return_sources=True)
    return assemble_parts(objects, [preds[s[0]] for s in sources], t)


def conflict_stats(preds: Sequence[QueryPrediction], objects: SegmentSet, t: Taxonomy) -> float:
    """Fraction of objects where no incompatible part wins the per-pixel argmax.

    ``preds`` are aligned with ``objects`` and must be unconstrained
    (carry a map for every part class).
    """
    if len(preds) != len(objects.segments):
        raise ValueError(f"{len(preds)} predictions for {len(objects.segments)} objects")
    every = set(range(1, t.num_part_classes + 1))
    for p in preds:
        if p.mode == CONSTRAINED or set(p.part_mask_prob) != every:
            raise ConstrainedInputError(
                "conflict statistics need unconstrained predictions; constrained ones cannot conflict")
    if not objects.segments:
        log.info("conflict_stats: no objects, reporting 1.0")
        return 1.0
    clean = 0
    for seg, pred in zip(objects.segments, preds):
        labels = _part_argmax(pred.part_mask_prob, sorted(every), seg.mask)
        winners = set(np.unique(labels[seg.mask]).tolist()) - {0}
        if winners <= set(t.object_class(seg.object_class).part_class_ids):
            clean += 1
    return clean / len(objects.segments)


def segment_conflict_stats(pps: SegmentSet, t: Taxonomy) -> float:
    """Fraction of objects in an assembled SegmentSet whose parts are all compatible."""
    if not pps.segments:
        log.info("segment_conflict_stats: no objects, reporting 1.0")
        return 1.0
    clean = sum(
        all(p.part_class in t.object_class(s.object_class).part_class_ids for p in s.parts)
        for s in pps.segments
    )
    return clean / len(pps.segments)


# -- dynamic per-object part queries ----------------------------------------

@dataclass(frozen=True, eq=False)
class DynamicPartPrediction:
    class_scores: np.ndarray  # (Npc+1,): entry k-1 is part k, last is "no part"
    mask_prob: np.ndarray     # (H, W)

    @property
    def part_class(self) -> int | None:
        k = int(np.argmax(self.class_scores))
        return None if k == len(self.class_scores) - 1 else k + 1


@dataclass(frozen=True)
class DynamicHeadWeights:
    query_weight: np.ndarray       # (Ndyn, E, E)
    query_bias: np.ndarray         # (Ndyn, E)
    class_weight: np.ndarray       # (Npc+1, E)
    class_bias: np.ndarray         # (Npc+1,)
    mask_mlp: tuple[Affine, ...]   # 3 layers

    @classmethod
    def random(cls, rng: np.random.Generator, embed_dim: int, num_parts: int, num_dynamic: int = 50,
               scale: float = 1.0) -> "DynamicHeadWeights":
        e = embed_dim
        s = scale / np.sqrt(e)
        return cls(
            rng.normal(0, s, (num_dynamic, e, e)), rng.normal(0, s, (num_dynamic, e)),
            rng.normal(0, s, (num_parts + 1, e)), rng.normal(0, s, num_parts + 1),
            tuple((rng.normal(0, s, (e, e)), rng.normal(0, s, e)) for _ in range(3)),
        )


def dynamic_head_forward(b: QueryBundle, w: DynamicHeadWeights) -> list[list[DynamicPartPrediction]]:
    """Per query, ``Ndyn`` dynamic part predictions (class scores + mask)."""
    q = np.asarray(b.queries, dtype=np.float64)
    f = np.asarray(b.features, dtype=np.float64)
    if q.shape[1] != w.query_weight.shape[2] or f.shape[0] != q.shape[1]:
        raise ValueError("dimension mismatch between queries, features and dynamic head")
    dyn = np.einsum("nfe,qe->qnf", w.query_weight, q) + w.query_bias        # (Nq, Ndyn, E)
    scores = softmax(dyn @ w.class_weight.T + w.class_bias, axis=-1)
    masks = expit(np.einsum("qne,ehw->qnhw", _mlp(dyn, w.mask_mlp), f))
    return [[DynamicPartPrediction(scores[i, n], masks[i, n]) for n in range(dyn.shape[1])]
            for i in range(q.shape[0])]


def assemble_dynamic_parts(
    objects: SegmentSet,
    dyn: Sequence[Sequence[DynamicPartPrediction]],
    t: Taxonomy,
) -> SegmentSet:
    """Parts from dynamic queries: filter, then per-pixel ``score * prob`` argmax.

    Dynamic queries predicting "no part" or an incompatible class are
    discarded. A pixel takes the winning query's class only where that
    query's mask probability exceeds 0.5. Same-class winners merge.
    """
    if len(dyn) != len(objects.segments):
        raise ValueError(f"{len(dyn)} dynamic prediction sets for {len(objects.segments)} objects")
    out = []
    for seg, queries in zip(objects.segments, dyn):
        compat = set(t.object_class(seg.object_class).part_class_ids)
        for d in queries:
            if d.mask_prob.shape != seg.mask.shape or len(d.class_scores) != t.num_part_classes + 1:
                raise ValueError("dynamic prediction dimensions disagree with canvas/taxonomy")
        valid = [d for d in queries if d.part_class is not None and d.part_class in compat]
        if not valid:
            out.append(ObjectSegment(seg.object_class, seg.instance_index, seg.mask))
            continue
        probs = np.stack([d.mask_prob for d in valid])
        weights = np.array([float(np.max(d.class_scores)) for d in valid])
        win = np.argmax(probs * weights[:, None, None], axis=0)
        best = np.take_along_axis(probs, win[None], axis=0)[0]
        labels = np.array([d.part_class for d in valid], dtype=np.int32)[win]
        labels[(best <= 0.5) | ~seg.mask] = 0
        out.append(ObjectSegment(seg.object_class, seg.instance_index, seg.mask, _parts_from_labels(labels)))
    return SegmentSet(objects.height, objects.width, tuple(out))
