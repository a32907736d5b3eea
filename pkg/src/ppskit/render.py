"""Colorize a uid label map with one hue per object class and a shade per part.

Borders between object instances are drawn in white.
"""

from __future__ import annotations

import colorsys
import io

import numpy as np

from .model import VOID, LabelMap

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
_PHI = 0.6180339887498949


def color_for(object_class: int, part_class: int) -> tuple[int, int, int]:
    hue = (object_class * _PHI) % 1.0
    value = 0.9 if part_class == 0 else 0.35 + 0.45 * ((part_class * _PHI) % 1.0)
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, value)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def instance_borders(pixels: np.ndarray) -> np.ndarray:
    """Non-void pixels with a 4-neighbor that is a different non-void object."""
    key = pixels >> 8
    live = pixels != VOID
    border = np.zeros(pixels.shape, dtype=bool)
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        diff = (key[tuple(a)] != key[tuple(b)]) & live[tuple(a)] & live[tuple(b)]
        border[tuple(a)] |= diff
        border[tuple(b)] |= diff
    return border


def render(m: LabelMap) -> np.ndarray:
    """RGB uint8 image of shape (H, W, 3)."""
    px = m.pixels
    out = np.zeros(px.shape + (3,), dtype=np.uint8)
    uids, inverse = np.unique(px, return_inverse=True)
    palette = np.array(
        [BLACK if u == VOID else color_for(int(u) >> 20, int(u) & 0xFF) for u in uids], dtype=np.uint8
    ).reshape(-1, 3)
    out[:] = palette[inverse.reshape(px.shape)]
    out[instance_borders(px)] = WHITE
    return out


def encode_png(rgb: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()
