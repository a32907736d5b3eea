"""Seeded synthetic PPS scenes and controlled distortions of them.

Randomness comes from an embedded SplitMix64 generator so a (params, seed)
pair yields the same bytes on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .merging import PartSemanticMap
from .model import ObjectSegment, PartSegment, SegmentSet
from .taxonomy import Taxonomy

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_SQUARE = np.ones((3, 3), dtype=bool)


class SceneError(ValueError):
    pass


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]`` (modulo reduction)."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]

    def sample(self, seq, k: int) -> list:
        items = list(seq)
        for i in range(k):
            j = self.randint(i, len(items) - 1)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` uniforms equal to ``n`` successive ``uniform()`` calls."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class SceneParams:
    taxonomy: Taxonomy
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 6
    shapes: tuple[str, ...] = ("rectangle", "ellipse")
    min_parts: int = 1
    max_parts: int = 3
    max_stuff: int = 3
    void_prob: float = 0.2
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8x8")
        if min(self.min_objects, self.max_objects, self.min_parts, self.max_parts) < 0:
            raise ValueError("counts must be non-negative")
        if self.min_objects > self.max_objects or self.min_parts > self.max_parts:
            raise ValueError("min count exceeds max count")
        if not set(self.shapes) <= {"rectangle", "ellipse"} or not self.shapes:
            raise ValueError(f"unknown shapes {self.shapes}")


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    y = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    x = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return y[:, None] ** 2 + x[None, :] ** 2 <= 1.0


def _band_parts(mask: np.ndarray, part_ids: list[int]) -> tuple[PartSegment, ...]:
    """Tile ``mask`` with horizontal bands, one per part id, top to bottom."""
    rows = np.flatnonzero(mask.any(axis=1))
    k = min(len(part_ids), len(rows))
    if k == 0:
        return ()
    bounds = [rows[0] + (len(rows) * i) // k for i in range(k)] + [rows[-1] + 1]
    out = []
    for i in range(k):
        band = np.zeros_like(mask)
        band[bounds[i]:bounds[i + 1]] = True
        out.append(PartSegment(part_ids[i], mask & band))
    return tuple(out)


def generate_scene(p: SceneParams) -> SegmentSet:
    t = p.taxonomy
    rng = SplitMix64(p.seed)
    h, w = p.height, p.width

    strips: list[tuple[int, np.ndarray]] = []
    stuff = list(t.stuff_ids)
    if stuff and p.max_stuff > 0:
        n = rng.randint(1, min(p.max_stuff, len(stuff), w))
        classes = rng.sample(stuff, n)
        cuts = sorted(rng.sample(range(1, w), n - 1)) if n > 1 else []
        edges = [0] + cuts + [w]
        for i, c in enumerate(classes):
            if rng.uniform() < p.void_prob:
                continue
            m = np.zeros((h, w), dtype=bool)
            m[:, edges[i]:edges[i + 1]] = True
            strips.append((c, m))

    things = list(t.thing_ids)
    n_obj = rng.randint(p.min_objects, p.max_objects) if things else 0
    occupied = np.zeros((h, w), dtype=bool)
    objects: list[ObjectSegment] = []
    next_instance: dict[int, int] = {}
    for _ in range(n_obj):
        cls = rng.choice(things)
        shape = rng.choice(p.shapes)
        for _attempt in range(p.max_retries):
            oh = rng.randint(4, max(4, h // 3))
            ow = rng.randint(4, max(4, w // 3))
            y0 = rng.randint(0, h - oh)
            x0 = rng.randint(0, w - ow)
            m = np.zeros((h, w), dtype=bool)
            m[y0:y0 + oh, x0:x0 + ow] = _shape_mask(shape, oh, ow)
            if not np.any(m & occupied):
                break
        else:
            raise SceneError(f"could not place {n_obj} objects on a {h}x{w} canvas")
        occupied |= m
        compat = list(t.object_class(cls).part_class_ids)
        parts: tuple[PartSegment, ...] = ()
        if compat:
            lo = min(p.min_parts, len(compat))
            k = rng.randint(lo, min(p.max_parts, len(compat)))
            parts = _band_parts(m, rng.sample(compat, k))
        inst = next_instance.get(cls, 0)
        next_instance[cls] = inst + 1
        objects.append(ObjectSegment(cls, inst, m, parts))

    segments = []
    for c, m in strips:
        m = m & ~occupied
        if m.any():
            segments.append(ObjectSegment(c, 0, m))
    return SegmentSet(h, w, tuple(segments + objects))


@dataclass(frozen=True)
class PerturbParams:
    erosion: int = 0
    dilation: int = 0
    drop_prob: float = 0.0
    split_prob: float = 0.0
    relabel_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.erosion < 0 or self.dilation < 0:
            raise ValueError("radii must be non-negative")
        for name in ("drop_prob", "split_prob", "relabel_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def _restrict(seg: ObjectSegment, mask: np.ndarray) -> ObjectSegment | None:
    if not mask.any():
        return None
    parts = tuple(PartSegment(q.part_class, q.mask & mask) for q in seg.parts if np.any(q.mask & mask))
    return ObjectSegment(seg.object_class, seg.instance_index, mask, parts)


def perturb(gt: SegmentSet, q: PerturbParams, t: Taxonomy) -> SegmentSet:
    """Distort a valid scene; the result is still a valid PPS scene.

    Random draws are made for every segment and part regardless of the
    probabilities, so raising one knob with a fixed seed only adds
    distortions. Steps, in order: drop thing instances, split thing
    instances at their middle row, relabel parts (to another compatible
    class not already in the object), erode every segment, dilate thing
    segments into stuff/void pixels (lower index wins contested pixels).
    """
    rng = SplitMix64(q.seed)
    draws = []
    for seg in gt.segments:
        u_drop, u_split = rng.uniform(), rng.uniform()
        part_draws = [(rng.uniform(), rng.next_u64()) for _ in seg.parts]
        draws.append((u_drop, u_split, part_draws))

    segs: list[ObjectSegment] = []
    next_instance: dict[int, int] = {}
    for seg in gt.segments:
        next_instance[seg.object_class] = max(next_instance.get(seg.object_class, 0), seg.instance_index + 1)
    for seg, (u_drop, u_split, part_draws) in zip(gt.segments, draws):
        thing = t.object_class(seg.object_class).is_thing
        if thing and u_drop < q.drop_prob:
            continue
        if q.relabel_prob > 0 and seg.parts:
            compat = t.object_class(seg.object_class).part_class_ids
            present = {x.part_class for x in seg.parts}
            new_parts = []
            for part, (u, pick) in zip(seg.parts, part_draws):
                options = [k for k in compat if k not in present]
                if u < q.relabel_prob and options:
                    k = options[pick % len(options)]
                    present.discard(part.part_class)
                    present.add(k)
                    part = PartSegment(k, part.mask)
                new_parts.append(part)
            seg = ObjectSegment(seg.object_class, seg.instance_index, seg.mask, tuple(new_parts))
        rows = np.flatnonzero(seg.mask.any(axis=1))
        if thing and u_split < q.split_prob and len(rows) >= 2:
            mid = rows[len(rows) // 2]
            top = seg.mask.copy()
            top[mid:] = False
            inst = next_instance[seg.object_class]
            next_instance[seg.object_class] = inst + 1
            segs.append(_restrict(seg, top))
            bottom = _restrict(seg, seg.mask & ~top)
            segs.append(replace(bottom, instance_index=inst))
            continue
        segs.append(seg)

    if q.erosion:
        eroded = []
        for seg in segs:
            m = ndimage.binary_erosion(seg.mask, _SQUARE, iterations=q.erosion, border_value=1)
            r = _restrict(seg, m)
            if r is not None:
                eroded.append(r)
        segs = eroded

    if q.dilation:
        thing_idx = [i for i, s in enumerate(segs) if t.object_class(s.object_class).is_thing]
        taken = np.zeros(gt.shape, dtype=bool)
        for i in thing_idx:
            taken |= segs[i].mask
        grown = {}
        for i in thing_idx:
            d = ndimage.binary_dilation(segs[i].mask, _SQUARE, iterations=q.dilation)
            new = d & ~taken
            taken |= new
            grown[i] = new
        out = []
        for i, seg in enumerate(segs):
            if i in grown:
                seg = ObjectSegment(seg.object_class, seg.instance_index, seg.mask | grown[i], seg.parts)
            else:
                seg = _restrict(seg, seg.mask & ~taken)
            if seg is not None:
                out.append(seg)
        segs = out
    return SegmentSet(gt.height, gt.width, tuple(segs))


def inject_incompatible_parts(objects: SegmentSet, t: Taxonomy, rate: float, seed: int) -> PartSemanticMap:
    """Part map of ``objects`` with object pixels relabeled to incompatible parts.

    Each pixel of a part-bearing object is independently, with probability
    ``rate``, given a part class incompatible with its object (when one
    exists). An object of area ``a`` is thus conflicted with probability
    ``1 - (1 - rate) ** a``.
    """
    rng = SplitMix64(seed)
    pm = PartSemanticMap.from_segments(objects).pixels.copy()
    all_parts = np.arange(1, t.num_part_classes + 1)
    for seg in objects.segments:
        compat = t.object_class(seg.object_class).part_class_ids
        if not compat:
            continue
        bad = np.setdiff1d(all_parts, compat)
        idx = np.flatnonzero(seg.mask.ravel())
        u = rng.uniform_array(idx.size)
        picks = rng.uniform_array(idx.size)
        if bad.size == 0:
            continue
        hit = u < rate
        flat = pm.ravel()
        flat[idx[hit]] = bad[(picks[hit] * bad.size).astype(np.int64)]
    return PartSemanticMap(pm)


def scene_pair(taxonomy: Taxonomy, seed: int, height: int = 64, width: int = 64,
               perturbation: PerturbParams | None = None, **scene_kw) -> tuple[SegmentSet, SegmentSet]:
    """A (ground truth, perturbed prediction) pair from one seed."""
    gt = generate_scene(SceneParams(taxonomy, height, width, seed=seed, **scene_kw))
    q = perturbation if perturbation is not None else PerturbParams()
    return gt, perturb(gt, replace(q, seed=(q.seed * 1_000_003 + seed) & MASK64), taxonomy)
