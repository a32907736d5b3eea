"""Rule-based fusion of object-level panoptic output with a part semantic map.

This is the post-processing a separate-queries pipeline needs: part labels
are instance-unaware, so each object takes the part pixels that fall inside
its mask. Labels incompatible with the object's class are discarded
(the pixel keeps part id 0), and part pixels outside every object are
ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import VOID, LabelMap, ObjectSegment, PartSegment, SegmentSet, SegmentSetError
from .taxonomy import Taxonomy


@dataclass(frozen=True, eq=False)
class PartSemanticMap:
    pixels: np.ndarray  # (H, W) part id per pixel, 0 = no part

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @classmethod
    def from_label_map(cls, m: LabelMap) -> "PartSemanticMap":
        """Take the part field of a uid map; void pixels become 0."""
        px = m.pixels
        return cls(np.where(px == VOID, 0, px & 0xFF).astype(np.int32))

    @classmethod
    def from_segments(cls, s: SegmentSet) -> "PartSemanticMap":
        out = np.zeros(s.shape, dtype=np.int32)
        for seg in s.segments:
            for p in seg.parts:
                out[p.mask] = p.part_class
        return cls(out)

    def to_label_map(self) -> LabelMap:
        """Encode as uids with class and instance 0 (the part map file convention)."""
        return LabelMap(self.pixels.astype(np.uint32))

    def check(self, t: Taxonomy) -> None:
        ids = np.unique(self.pixels)
        bad = [int(k) for k in ids if k != 0 and not t.has_part_class(int(k))]
        if bad:
            raise SegmentSetError(f"unknown part ids in part map: {bad}")


def _check_canvas(objects: SegmentSet, parts: PartSemanticMap) -> None:
    if objects.shape != parts.shape:
        raise ValueError(f"canvas mismatch: objects {objects.shape} vs parts {parts.shape}")


def merge(objects: SegmentSet, parts: PartSemanticMap, t: Taxonomy) -> SegmentSet:
    _check_canvas(objects, parts)
    out = []
    for seg in objects.segments:
        compat = t.object_class(seg.object_class).part_class_ids
        part_segs = []
        for k in sorted(compat):
            m = seg.mask & (parts.pixels == k)
            if m.any():
                part_segs.append(PartSegment(k, m))
        out.append(ObjectSegment(seg.object_class, seg.instance_index, seg.mask, tuple(part_segs)))
    return SegmentSet(objects.height, objects.width, tuple(out))


def _demoted(seg: ObjectSegment, parts: PartSemanticMap, t: Taxonomy) -> int:
    labels = parts.pixels[seg.mask]
    compat = np.asarray(t.object_class(seg.object_class).part_class_ids, dtype=labels.dtype)
    return int(np.count_nonzero((labels != 0) & ~np.isin(labels, compat)))


def merge_conflict_rate(objects: SegmentSet, parts: PartSemanticMap, t: Taxonomy) -> float:
    """Fraction of part-bearing objects containing at least one demoted pixel."""
    _check_canvas(objects, parts)
    bearing = [s for s in objects.segments if t.object_class(s.object_class).has_parts]
    if not bearing:
        return 0.0
    return sum(_demoted(s, parts, t) > 0 for s in bearing) / len(bearing)
