"""Built-in map templates and route geometry.

Three templates are available: ``highway2`` and ``highway3`` (straight
multi-lane roads along +x, lane 0 rightmost) and ``junction4way`` (two
perpendicular two-lane roads crossing at the origin, right-hand traffic).
Routes are arc-length parameterized paths made of line and arc segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

LANE_WIDTH = 3.5
HIGHWAY_LENGTH = 3000.0
ARM_LENGTH = 100.0
TURN_RADIUS = 8.0

MAP_TEMPLATES = ("highway2", "highway3", "junction4way")

_ARMS = ("south", "east", "north", "west")
_MOVES = ("straight", "left", "right")


@dataclass(frozen=True)
class _Line:
    x0: float
    y0: float
    heading: float
    length: float

    def pose(self, s: float) -> tuple[float, float, float]:
        return (
            self.x0 + s * math.cos(self.heading),
            self.y0 + s * math.sin(self.heading),
            self.heading,
        )


@dataclass(frozen=True)
class _Arc:
    cx: float
    cy: float
    radius: float
    start_angle: float  # polar angle of the start point about the center
    turn: int  # +1 counter-clockwise (left), -1 clockwise (right)
    length: float

    def pose(self, s: float) -> tuple[float, float, float]:
        ang = self.start_angle + self.turn * s / self.radius
        x = self.cx + self.radius * math.cos(ang)
        y = self.cy + self.radius * math.sin(ang)
        return x, y, wrap_angle(ang + self.turn * math.pi / 2)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Path:
    """Piecewise line/arc path. Poses past the end extrapolate straight."""

    name: str
    segments: tuple

    @property
    def length(self) -> float:
        return sum(seg.length for seg in self.segments)

    def pose(self, s: float) -> tuple[float, float, float]:
        if s <= 0.0:
            x, y, h = self.segments[0].pose(0.0)
            return x + s * math.cos(h), y + s * math.sin(h), h
        for seg in self.segments:
            if s <= seg.length:
                return seg.pose(s)
            s -= seg.length
        x, y, h = self.segments[-1].pose(self.segments[-1].length)
        return x + s * math.cos(h), y + s * math.sin(h), h


def _rotate(x: float, y: float, k: int) -> tuple[float, float]:
    ang = k * math.pi / 2
    c, s = round(math.cos(ang)), round(math.sin(ang))
    return c * x - s * y, s * x + c * y


def _junction_path(arm: str, move: str) -> Path:
    # Canonical geometry enters from the south heading north in the
    # northbound lane (x = +w/2); other arms are 90-degree rotations.
    k = _ARMS.index(arm)
    half = LANE_WIDTH / 2
    heading0 = wrap_angle(math.pi / 2 + k * math.pi / 2)
    sx, sy = _rotate(half, -ARM_LENGTH, k)
    if move == "straight":
        return Path(f"{arm}_{move}", (_Line(sx, sy, heading0, 2 * ARM_LENGTH),))
    if move == "left":
        # Arc centered at (half - R, half - R) ends heading west at y = +half.
        cx, cy = half - TURN_RADIUS, half - TURN_RADIUS
        turn = 1
        start_angle = 0.0
    else:
        # Arc centered at (half + R, -half - R) ends heading east at y = -half.
        cx, cy = half + TURN_RADIUS, -half - TURN_RADIUS
        turn = -1
        start_angle = math.pi
    lead_in = ARM_LENGTH + cy
    arc_len = TURN_RADIUS * math.pi / 2
    rcx, rcy = _rotate(cx, cy, k)
    end_local = (
        cx + TURN_RADIUS * math.cos(start_angle + turn * math.pi / 2),
        cy + TURN_RADIUS * math.sin(start_angle + turn * math.pi / 2),
    )
    ex, ey = _rotate(*end_local, k)
    exit_heading = wrap_angle(heading0 + turn * math.pi / 2)
    segs = (
        _Line(sx, sy, heading0, lead_in),
        _Arc(rcx, rcy, TURN_RADIUS, wrap_angle(start_angle + k * math.pi / 2), turn, arc_len),
        _Line(ex, ey, exit_heading, ARM_LENGTH),
    )
    return Path(f"{arm}_{move}", segs)


def _highway_path(lane: int) -> Path:
    return Path(f"lane{lane}", (_Line(0.0, lane * LANE_WIDTH, 0.0, HIGHWAY_LENGTH),))


@lru_cache(maxsize=None)
def routes(map_template: str) -> dict[str, Path]:
    """All named routes of a map template."""
    if map_template == "highway2":
        return {f"lane{i}": _highway_path(i) for i in range(2)}
    if map_template == "highway3":
        return {f"lane{i}": _highway_path(i) for i in range(3)}
    if map_template == "junction4way":
        return {f"{a}_{m}": _junction_path(a, m) for a in _ARMS for m in _MOVES}
    raise KeyError(map_template)


def is_highway(map_template: str) -> bool:
    return map_template.startswith("highway")


def lane_index(route: str) -> int:
    return int(route[len("lane"):])


@lru_cache(maxsize=None)
def conflict_point(map_template: str, route_a: str, route_b: str,
                   step: float = 0.05, tol: float = 0.05) -> tuple[float, float] | None:
    """First point along ``route_a`` that lies on ``route_b``.

    Returns the arc lengths ``(s_a, s_b)`` of that point on each route, or
    None when the paths never meet.
    """
    paths = routes(map_template)
    pa, pb = paths[route_a], paths[route_b]
    sa = np.arange(0.0, pa.length, step)
    sb = np.arange(0.0, pb.length, step)
    pts_a = np.array([pa.pose(s)[:2] for s in sa])
    pts_b = np.array([pb.pose(s)[:2] for s in sb])
    for lo in range(0, len(sa), 512):
        chunk = pts_a[lo:lo + 512]
        d2 = ((chunk[:, None, :] - pts_b[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        hit = np.flatnonzero(d2[np.arange(len(chunk)), nearest] < tol * tol)
        if hit.size:
            i = hit[0]
            return float(sa[lo + i]), float(sb[nearest[i]])
    return None
