"""Oriented-rectangle overlap by the separating-axis theorem.

A rectangle is ``(x, y, heading, length, width)`` with (x, y) its center.
Touching rectangles count as overlapping.
"""

from __future__ import annotations

import math

import numpy as np


def corners(x: float, y: float, heading: float, length: float, width: float):
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2, width / 2
    return [
        (x + c * dx - s * dy, y + s * dx + c * dy)
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def sat_overlap(rect_a, rect_b) -> bool:
    """True iff the two oriented rectangles intersect."""
    ca = corners(*rect_a)
    cb = corners(*rect_b)
    for heading in (rect_a[2], rect_b[2]):
        for ax, ay in ((math.cos(heading), math.sin(heading)),
                       (-math.sin(heading), math.cos(heading))):
            pa = [ax * px + ay * py for px, py in ca]
            pb = [ax * px + ay * py for px, py in cb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def _corners_batch(x, y, h, length, width):
    c, s = np.cos(h), np.sin(h)
    sign_l = np.array([1.0, -1.0, -1.0, 1.0])
    sign_w = np.array([1.0, 1.0, -1.0, -1.0])
    dx = (np.asarray(length)[..., None] / 2) * sign_l
    dy = (np.asarray(width)[..., None] / 2) * sign_w
    cx = x[..., None] + c[..., None] * dx - s[..., None] * dy
    cy = y[..., None] + s[..., None] * dx + c[..., None] * dy
    return cx, cy


def sat_overlap_batch(xa, ya, ha, la, wa, xb, yb, hb, lb, wb) -> np.ndarray:
    """Elementwise ``sat_overlap`` over broadcastable arrays."""
    xa, ya, ha, xb, yb, hb = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (xa, ya, ha, xb, yb, hb)))
    ax_, ay_ = _corners_batch(xa, ya, ha, np.broadcast_to(la, xa.shape), np.broadcast_to(wa, xa.shape))
    bx_, by_ = _corners_batch(xb, yb, hb, np.broadcast_to(lb, xb.shape), np.broadcast_to(wb, xb.shape))
    overlap = np.ones(xa.shape, dtype=bool)
    for heading in (ha, hb):
        c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
        for ux, uy in ((c, s), (-s, c)):
            pa = ax_ * ux + ay_ * uy
            pb = bx_ * ux + by_ * uy
            sep = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
            overlap &= ~sep
    return overlap
