"""Binary file formats: PPSM label maps and QPRD prediction bundles.

All integers and floats are little-endian.

PPSM::

    magic "PPSM" | version u16 = 1 | reserved u16 = 0 | width u32 | height u32
    | width*height uid u32, row-major

QPRD::

    magic "QPRD" | version u16 = 1 | flags u16 | Nq E C Npc H W (u32 each)
    | payload sections (f32)

flags bit 0: raw queries, features and head weights follow (in that order,
weights in ``HeadWeights`` field order); bit 1: precomputed probabilities
follow (class scores, object mask probabilities, an ``Nq x Npc`` 0/1 key
table, then the part mask probabilities of present keys in (query, part id)
order). Bits 8-9 carry the adaptation-MLP depth of the raw weights.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import UID_DTYPE, LabelMap

PPSM_MAGIC = b"PPSM"
QPRD_MAGIC = b"QPRD"
VERSION = 1

FLAG_RAW = 1 << 0
FLAG_PROBS = 1 << 1
DEPTH_SHIFT = 8

_PPSM_HEADER = struct.Struct("<4sHHII")
_QPRD_HEADER = struct.Struct("<4sHH6I")


class CodecError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a truncated file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_ppsm(m: LabelMap) -> bytes:
    header = _PPSM_HEADER.pack(PPSM_MAGIC, VERSION, 0, m.width, m.height)
    return header + np.ascontiguousarray(m.pixels, dtype="<u4").tobytes()


def decode_ppsm(data: bytes) -> LabelMap:
    if len(data) < _PPSM_HEADER.size:
        raise CodecError("truncated PPSM header")
    magic, version, _reserved, width, height = _PPSM_HEADER.unpack_from(data)
    if magic != PPSM_MAGIC:
        raise CodecError(f"bad magic {magic!r}, expected {PPSM_MAGIC!r}")
    if version != VERSION:
        raise CodecError(f"unsupported PPSM version {version}")
    expected = _PPSM_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise CodecError(f"PPSM payload size {len(data)} != expected {expected}")
    px = np.frombuffer(data, dtype="<u4", offset=_PPSM_HEADER.size).reshape(height, width)
    return LabelMap(px.astype(UID_DTYPE))


def read_ppsm(path: str | Path) -> LabelMap:
    try:
        return decode_ppsm(Path(path).read_bytes())
    except CodecError as exc:
        raise CodecError(f"{path}: {exc}") from None


def write_ppsm(path: str | Path, m: LabelMap) -> None:
    atomic_write_bytes(path, encode_ppsm(m))


# -- QPRD --------------------------------------------------------------------

def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        end = self.offset + 4 * n
        if end > len(self.data):
            raise CodecError("truncated QPRD payload")
        arr = np.frombuffer(self.data, dtype="<f4", count=n, offset=self.offset)
        self.offset = end
        return arr.astype(np.float64).reshape(shape)


def encode_qprd(bundle=None, weights=None, predictions=None, *, num_classes: int, num_parts: int) -> bytes:
    """Serialize a raw bundle + weights and/or precomputed predictions.

    ``predictions`` must all share one canvas; part maps are written for
    whichever keys each prediction carries.
    """
    flags = 0
    nq = e = h = w = 0
    sections: list[bytes] = []
    if bundle is not None:
        if weights is None:
            raise CodecError("raw section needs both bundle and weights")
        flags |= FLAG_RAW | (len(weights.adapt_mlp) << DEPTH_SHIFT)
        nq, e = bundle.queries.shape
        _, h, w = bundle.features.shape
        sections.append(_f32(bundle.queries))
        sections.append(_f32(bundle.features))
        sections.append(_f32(weights.class_weight))
        sections.append(_f32(weights.class_bias))
        for lw, lb in list(weights.mask_mlp) + list(weights.adapt_mlp):
            sections.append(_f32(lw))
            sections.append(_f32(lb))
        sections.append(_f32(weights.part_weight))
        sections.append(_f32(weights.part_bias))
    if predictions is not None:
        flags |= FLAG_PROBS
        preds = list(predictions)
        if bundle is None:
            nq = len(preds)
            if preds:
                h, w = preds[0].object_mask_prob.shape
        elif len(preds) != nq:
            raise CodecError("prediction count disagrees with query count")
        sections.append(_f32(np.array([p.class_scores for p in preds]).reshape(nq, num_classes + 1)))
        sections.append(_f32(np.array([p.object_mask_prob for p in preds]).reshape(nq, h, w)))
        keys = np.zeros((nq, num_parts))
        for i, p in enumerate(preds):
            for k in p.part_mask_prob:
                keys[i, k - 1] = 1.0
        sections.append(_f32(keys))
        for p in preds:
            for k in sorted(p.part_mask_prob):
                sections.append(_f32(p.part_mask_prob[k]))
    header = _QPRD_HEADER.pack(QPRD_MAGIC, VERSION, flags, nq, e, num_classes, num_parts, h, w)
    return header + b"".join(sections)


def decode_qprd(data: bytes) -> dict:
    """Parse a QPRD document.

    Returns a dict with the header fields plus ``bundle``/``weights`` (when the
    raw flag is set) and ``predictions`` (when the probability flag is set).
    """
    from .jops import HeadWeights, QueryBundle, QueryPrediction

    if len(data) < _QPRD_HEADER.size:
        raise CodecError("truncated QPRD header")
    magic, version, flags, nq, e, c, npc, h, w = _QPRD_HEADER.unpack_from(data)
    if magic != QPRD_MAGIC:
        raise CodecError(f"bad magic {magic!r}, expected {QPRD_MAGIC!r}")
    if version != VERSION:
        raise CodecError(f"unsupported QPRD version {version}")
    r = _Reader(data, _QPRD_HEADER.size)
    out: dict = {"num_queries": nq, "embed_dim": e, "num_classes": c, "num_parts": npc,
                 "height": h, "width": w, "flags": flags}
    if flags & FLAG_RAW:
        depth = (flags >> DEPTH_SHIFT) & 0x3
        queries = r.take(nq, e)
        features = r.take(e, h, w)
        cw, cb = r.take(c + 1, e), r.take(c + 1)
        mask_mlp = tuple((r.take(e, e), r.take(e)) for _ in range(3))
        adapt = tuple((r.take(e, e), r.take(e)) for _ in range(depth))
        pw, pb = r.take(npc, e, e), r.take(npc, e)
        out["bundle"] = QueryBundle(queries, features)
        out["weights"] = HeadWeights(cw, cb, mask_mlp, adapt, pw, pb)
    if flags & FLAG_PROBS:
        scores = r.take(nq, c + 1)
        masks = r.take(nq, h, w)
        keys = r.take(nq, npc)
        preds = []
        for i in range(nq):
            parts = {int(k) + 1: r.take(h, w) for k in np.flatnonzero(keys[i] > 0.5)}
            preds.append(QueryPrediction(scores[i], masks[i], parts))
        out["predictions"] = preds
    if r.offset != len(data):
        raise CodecError(f"{len(data) - r.offset} trailing bytes in QPRD document")
    return out


def read_qprd(path: str | Path) -> dict:
    try:
        return decode_qprd(Path(path).read_bytes())
    except CodecError as exc:
        raise CodecError(f"{path}: {exc}") from None


def write_qprd(path: str | Path, **kwargs) -> None:
    atomic_write_bytes(path, encode_qprd(**kwargs))
