import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box, obj, scene
from ppskit.model import (
    VOID,
    LabelMap,
    SegmentSet,
    SegmentSetError,
    UidError,
    label_map_from_segments,
    pack_uid,
    segments_from_label_map,
    unpack_uid,
    validate_pps,
)
from ppskit.synth import SceneParams, generate_scene


@pytest.mark.parametrize(
    "fields, uid",
    [((0, 0, 0), 0), ((3, 2, 1), 3 * 1048576 + 2 * 256 + 1), ((4095, 4095, 254), (4095 << 20) | (4095 << 8) | 254)],
)
def test_pack_unpack_examples(fields, uid):
    assert pack_uid(*fields) == uid
    assert unpack_uid(uid) == fields


def test_pack_3_2_1_literal():
    assert pack_uid(3, 2, 1) == 3146241


@pytest.mark.parametrize("fields", [(5000, 0, 0), (0, 4096, 0), (0, 0, 256), (-1, 0, 0)])
def test_pack_overflow(fields):
    with pytest.raises(UidError):
        pack_uid(*fields)


def test_unpack_void_rejected():
    with pytest.raises(UidError):
        unpack_uid(VOID)


@given(st.integers(0, 4095), st.integers(0, 4095), st.integers(0, 255))
def test_pack_round_trip(c, i, p):
    uid = pack_uid(c, i, p)
    if uid != VOID:
        assert unpack_uid(uid) == (c, i, p)


def test_uniform_stuff_map(toy):
    m = LabelMap(np.full((5, 7), pack_uid(1, 0, 0), dtype=np.uint32))
    s = segments_from_label_map(m, toy)
    assert len(s) == 1
    seg = s.segments[0]
    assert seg.key == (1, 0) and seg.parts == () and seg.mask.all()


def test_two_instances_half_covered_by_part(toy):
    # rows 0-1: instance 0, rows 2-3: instance 1; left half of each is part 1
    px = np.zeros((4, 4), dtype=np.uint32)
    px[:2] = pack_uid(2, 0, 0)
    px[2:] = pack_uid(2, 1, 0)
    px[:2, :2] = pack_uid(2, 0, 1)
    px[2:, :2] = pack_uid(2, 1, 1)
    s = segments_from_label_map(LabelMap(px), toy)
    assert len(s) == 2
    for seg in s.segments:
        assert seg.mask.sum() == 8
        assert len(seg.parts) == 1
        part = seg.parts[0]
        assert part.part_class == 1 and part.mask.sum() == 4
        assert (part.mask & seg.mask).sum() == 4
        assert part.mask[:, :2].sum() == 4


def test_all_void_map(toy):
    s = segments_from_label_map(LabelMap.void(3, 3), toy)
    assert len(s) == 0 and s.shape == (3, 3)


@pytest.mark.parametrize("uid", [pack_uid(9, 0, 0), pack_uid(2, 0, 3), pack_uid(2, 0, 77)])
def test_bad_uids_rejected(toy, uid):
    with pytest.raises(SegmentSetError):
        segments_from_label_map(LabelMap(np.full((2, 2), uid, dtype=np.uint32)), toy)


def test_empty_set_renders_void():
    m = label_map_from_segments(SegmentSet(16, 16, ()))
    assert m.pixels.shape == (16, 16) and (m.pixels == VOID).all()


def test_overlap_error_names_both():
    s = scene((4, 4), obj(2, 0, box((4, 4), 0, 2, 0, 2)), obj(2, 1, box((4, 4), 1, 3, 1, 3)))
    with pytest.raises(SegmentSetError, match="segments 0 and 1"):
        label_map_from_segments(s)


@pytest.mark.parametrize("seed", range(100))
def test_round_trip_synthetic(toy, seed):
    s = generate_scene(SceneParams(toy, 24, 32, seed=seed))
    back = segments_from_label_map(label_map_from_segments(s, toy), toy)
    assert back == s


def test_segment_set_equality_ignores_order():
    a = obj(2, 0, box((4, 4), 0, 2, 0, 4))
    b = obj(2, 1, box((4, 4), 2, 4, 0, 4))
    assert scene((4, 4), a, b) == scene((4, 4), b, a)
    assert scene((4, 4), a) != scene((4, 4), b)


# -- validate_pps ------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_generator_output_validates(seed):
    from ppskit.taxonomy import make_taxonomy

    t = make_taxonomy(things=[[1, 2], [3], []], stuff=2)
    assert validate_pps(generate_scene(SceneParams(t, 20, 20, seed=seed)), t) == []


def _kinds(report):
    return [v.kind for v in report]


def test_part_outside_object(toy):
    shape = (4, 4)
    part = box(shape, 0, 1, 0, 3)
    s = scene(shape, obj(2, 0, box(shape, 0, 2, 0, 2), [(1, part)]))
    assert _kinds(validate_pps(s, toy)) == ["part-subset"]


def test_incompatible_part(toy):
    shape = (4, 4)
    t = toy
    m = box(shape, 0, 2, 0, 2)
    s = scene(shape, obj(2, 0, m, [(3, m)]))
    assert _kinds(validate_pps(s, t)) == ["compatibility"]


def test_unknown_part_nine_is_compatibility_violation():
    from ppskit.taxonomy import make_taxonomy

    t = make_taxonomy(things=[[1, 2], [3, 4, 5, 6, 7, 8, 9]])
    m = box((4, 4), 0, 2, 0, 2)
    s = scene((4, 4), obj(0, 0, m, [(9, m)]))
    assert _kinds(validate_pps(s, t)) == ["compatibility"]


@pytest.mark.parametrize(
    "segments, kind",
    [
        ([obj(2, 0, box((4, 4), 0, 2, 0, 4)), obj(2, 1, box((4, 4), 1, 3, 0, 4))], "object-disjoint"),
        ([obj(0, 0, box((4, 4), 0, 1, 0, 4)), obj(0, 1, box((4, 4), 2, 3, 0, 4))], "stuff-unique"),
        ([obj(9, 0, box((4, 4), 0, 1, 0, 4))], "unknown-class"),
        ([obj(2, 0, np.zeros((4, 4), bool))], "empty-mask"),
        ([obj(2, 0, box((4, 4), 0, 2, 0, 4), [(1, box((4, 4), 0, 1, 0, 4)), (2, box((4, 4), 0, 2, 0, 1))])],
         "part-disjoint"),
        ([obj(2, 0, box((4, 4), 0, 2, 0, 4), [(1, box((4, 4), 0, 1, 0, 2)), (1, box((4, 4), 1, 2, 0, 2))])],
         "part-unique"),
        ([obj(2, 0, box((3, 3), 0, 2, 0, 2))], "shape"),
    ],
)
def test_constructed_violations(toy, segments, kind):
    s = SegmentSet(4, 4, tuple(segments))
    assert kind in _kinds(validate_pps(s, toy))


def test_violation_carries_indices(toy):
    s = scene((4, 4), obj(2, 0, box((4, 4), 0, 2, 0, 4)), obj(2, 1, box((4, 4), 1, 3, 0, 4)))
    (v,) = validate_pps(s, toy)
    assert (v.segment, v.other) == (0, 1)
    assert "segment 0" in str(v)
