"""PPS data structures, the packed per-pixel uid, and structural validation.

A pixel uid packs ``(object_class, instance_index, part_class)`` as::

    uid = object_class << 20 | instance_index << 8 | part_class

with 12/12/8 bits. ``VOID`` (all ones) marks pixels that belong to no segment.
Part id 0 marks object pixels not covered by any labeled part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .taxonomy import STUFF, Taxonomy

VOID = 0xFFFFFFFF
CLASS_BITS, INSTANCE_BITS, PART_BITS = 12, 12, 8
MAX_CLASS = 1 << CLASS_BITS
MAX_INSTANCE = 1 << INSTANCE_BITS
MAX_PART = 1 << PART_BITS
UID_DTYPE = np.uint32


class UidError(ValueError):
    pass


class SegmentSetError(ValueError):
    """Raised when a SegmentSet violates an invariant required by an operation."""


def pack_uid(object_class: int, instance_index: int, part_class: int = 0) -> int:
    if not 0 <= object_class < MAX_CLASS:
        raise UidError(f"object_class {object_class} out of range [0, {MAX_CLASS})")
    if not 0 <= instance_index < MAX_INSTANCE:
        raise UidError(f"instance_index {instance_index} out of range [0, {MAX_INSTANCE})")
    if not 0 <= part_class < MAX_PART:
        raise UidError(f"part_class {part_class} out of range [0, {MAX_PART})")
    uid = (object_class << 20) | (instance_index << 8) | part_class
    if uid == VOID:
        raise UidError("(4095, 4095, 255) is reserved for the void sentinel")
    return uid


def unpack_uid(uid: int) -> tuple[int, int, int]:
    uid = int(uid)
    if uid == VOID:
        raise UidError("cannot unpack the void sentinel")
    if not 0 <= uid < (1 << 32):
        raise UidError(f"uid {uid} is not an unsigned 32-bit value")
    return uid >> 20, (uid >> 8) & 0xFFF, uid & 0xFF


def object_key(uids: np.ndarray) -> np.ndarray:
    """Per-pixel ``(class, instance)`` key (``uid >> 8``); void maps to ``VOID >> 8``."""
    return uids >> 8


@dataclass(frozen=True, eq=False)
class PartSegment:
    part_class: int
    mask: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PartSegment):
            return NotImplemented
        return self.part_class == other.part_class and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class ObjectSegment:
    object_class: int
    instance_index: int
    mask: np.ndarray
    parts: tuple[PartSegment, ...] = ()

    @property
    def key(self) -> tuple[int, int]:
        return (self.object_class, self.instance_index)

    def __eq__(self, other):
        if not isinstance(other, ObjectSegment):
            return NotImplemented
        return (
            self.key == other.key
            and np.array_equal(self.mask, other.mask)
            and _sorted_parts(self.parts) == _sorted_parts(other.parts)
        )

    def part_label_map(self) -> np.ndarray:
        """Part id per pixel inside the object (0 elsewhere or where unlabeled)."""
        out = np.zeros(self.mask.shape, dtype=np.int32)
        for p in self.parts:
            out[p.mask] = p.part_class
        return out


def _sorted_parts(parts: Iterable[PartSegment]) -> list[PartSegment]:
    return sorted(parts, key=lambda p: p.part_class)


@dataclass(frozen=True, eq=False)
class SegmentSet:
    height: int
    width: int
    segments: tuple[ObjectSegment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def canonical(self) -> list[ObjectSegment]:
        return sorted(self.segments, key=lambda s: s.key)

    def __eq__(self, other):
        """Equality up to segment ordering."""
        if not isinstance(other, SegmentSet):
            return NotImplemented
        return self.shape == other.shape and self.canonical() == other.canonical()


@dataclass(frozen=True, eq=False)
class LabelMap:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError("label map must be 2-D")
        object.__setattr__(self, "pixels", px.astype(UID_DTYPE, copy=False))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def void(cls, height: int, width: int) -> "LabelMap":
        return cls(np.full((height, width), VOID, dtype=UID_DTYPE))

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


def check_label_map(m: LabelMap, t: Taxonomy) -> list[str]:
    """Return problems with the uids of ``m`` under ``t`` (empty if valid)."""
    problems = []
    for uid in np.unique(m.pixels):
        if uid == VOID:
            continue
        cls, inst, part = unpack_uid(uid)
        if not t.has_object_class(cls):
            problems.append(f"unknown object class {cls} (uid {uid})")
            continue
        if part and part not in t.object_class(cls).part_class_ids:
            kind = "unknown" if not t.has_part_class(part) else "incompatible"
            problems.append(f"{kind} part {part} on object class {cls} (uid {uid})")
    return problems


def segments_from_label_map(m: LabelMap, t: Taxonomy) -> SegmentSet:
    problems = check_label_map(m, t)
    if problems:
        raise SegmentSetError("; ".join(problems))
    px = m.pixels
    flat = px.ravel()
    uids, inverse = np.unique(flat, return_inverse=True)
    inverse = inverse.reshape(px.shape)
    segments = []
    keys = uids >> 8
    for key in np.unique(keys[uids != VOID]):
        members = np.flatnonzero((keys == key) & (uids != VOID))
        obj_mask = np.isin(inverse, members)
        parts = []
        for i in members:
            part = int(uids[i]) & 0xFF
            if part:
                parts.append(PartSegment(part, inverse == i))
        cls, inst = int(key) >> 12, int(key) & 0xFFF
        segments.append(ObjectSegment(cls, inst, obj_mask, tuple(_sorted_parts(parts))))
    return SegmentSet(px.shape[0], px.shape[1], tuple(segments))


def label_map_from_segments(s: SegmentSet, t: Taxonomy | None = None) -> LabelMap:
    """Render a SegmentSet into a LabelMap.

    Raises SegmentSetError naming the offending segments when object masks
    overlap, or a part escapes its object or collides with a sibling part.
    """
    px = np.full(s.shape, VOID, dtype=UID_DTYPE)
    owner = np.full(s.shape, -1, dtype=np.int64)
    for i, seg in enumerate(s.segments):
        if seg.mask.shape != s.shape:
            raise SegmentSetError(f"segment {i}: mask shape {seg.mask.shape} != canvas {s.shape}")
        clash = owner[seg.mask]
        clash = clash[clash >= 0]
        if clash.size:
            raise SegmentSetError(f"segments {int(clash[0])} and {i} have overlapping object masks")
        owner[seg.mask] = i
        px[seg.mask] = pack_uid(seg.object_class, seg.instance_index, 0)
        covered = np.zeros(s.shape, dtype=bool)
        for j, part in enumerate(seg.parts):
            if np.any(part.mask & ~seg.mask):
                raise SegmentSetError(f"segment {i} part {j}: part mask is not a subset of the object mask")
            if np.any(part.mask & covered):
                raise SegmentSetError(f"segment {i} part {j}: part masks overlap")
            covered |= part.mask
            px[part.mask] = pack_uid(seg.object_class, seg.instance_index, part.part_class)
    return LabelMap(px)


@dataclass(frozen=True)
class Violation:
    kind: str
    segment: int
    other: int | None = None
    detail: str = ""

    def __str__(self):
        where = f"segment {self.segment}" + (f" / {self.other}" if self.other is not None else "")
        return f"{self.kind} at {where}" + (f": {self.detail}" if self.detail else "")


# violation kinds
PART_SUBSET = "part-subset"
PART_DISJOINT = "part-disjoint"
PART_UNIQUE = "part-unique"
COMPATIBILITY = "compatibility"
OBJECT_DISJOINT = "object-disjoint"
STUFF_UNIQUE = "stuff-unique"
UNKNOWN_CLASS = "unknown-class"
EMPTY_MASK = "empty-mask"
SHAPE = "shape"


def validate_pps(s: SegmentSet, t: Taxonomy) -> list[Violation]:
    """List every violated PPS constraint; an empty list means ``s`` is valid.

    For part-level violations ``other`` holds the part index within the
    segment; for object-level pairs it holds the second segment index.
    """
    out: list[Violation] = []
    stuff_seen: dict[int, int] = {}
    union = np.zeros(s.shape, dtype=bool)
    masks_so_far: list[tuple[int, np.ndarray]] = []
    for i, seg in enumerate(s.segments):
        if seg.mask.shape != s.shape:
            out.append(Violation(SHAPE, i, detail=f"{seg.mask.shape} != {s.shape}"))
            continue
        if not seg.mask.any():
            out.append(Violation(EMPTY_MASK, i))
        if not t.has_object_class(seg.object_class):
            out.append(Violation(UNKNOWN_CLASS, i, detail=f"object class {seg.object_class}"))
            compat: tuple[int, ...] = ()
        else:
            cdef = t.object_class(seg.object_class)
            compat = cdef.part_class_ids
            if cdef.kind == STUFF:
                if seg.object_class in stuff_seen:
                    out.append(Violation(STUFF_UNIQUE, stuff_seen[seg.object_class], i,
                                         f"stuff class {seg.object_class}"))
                else:
                    stuff_seen[seg.object_class] = i
        if np.any(union & seg.mask):
            for k, other in masks_so_far:
                if np.any(other & seg.mask):
                    out.append(Violation(OBJECT_DISJOINT, k, i))
        union |= seg.mask
        masks_so_far.append((i, seg.mask))

        part_union = np.zeros(s.shape, dtype=bool)
        part_classes: dict[int, int] = {}
        for j, part in enumerate(seg.parts):
            if part.mask.shape != s.shape:
                out.append(Violation(SHAPE, i, j, "part mask shape"))
                continue
            if not part.mask.any():
                out.append(Violation(EMPTY_MASK, i, j, "part"))
            if np.any(part.mask & ~seg.mask):
                out.append(Violation(PART_SUBSET, i, j, f"part class {part.part_class}"))
            if np.any(part.mask & part_union):
                out.append(Violation(PART_DISJOINT, i, j, f"part class {part.part_class}"))
            part_union |= part.mask
            if part.part_class in part_classes:
                out.append(Violation(PART_UNIQUE, i, j, f"part class {part.part_class} repeated"))
            part_classes[part.part_class] = j
            if part.part_class not in compat:
                out.append(Violation(COMPATIBILITY, i, j,
                                     f"part class {part.part_class} on object class {seg.object_class}"))
    return out


def segment_set(shape: tuple[int, int], segments: Sequence[ObjectSegment] = ()) -> SegmentSet:
    return SegmentSet(int(shape[0]), int(shape[1]), tuple(segments))
