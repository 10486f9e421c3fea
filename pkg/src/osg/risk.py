"""Criticalness of a simulated scenario: TTC, collision count, ADV score, collision types."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from osg.geometry import sat_overlap_batch
from osg.sim import CollisionEvent, SimulationTrace, VehicleState

P_COL = 100.0
T_MAX = 10.0
TTC_STEP = 0.1
DEFAULT_EXTENT = (4.5, 2.0)

# collision sectors, degrees
FRONT_DEG = 30.0
SIDE_DEG = 150.0
CUTOFF_BEARING_DEG = 120.0
CUTOFF_LATERAL_SPEED = 0.3
CROSSING_DEG = (45.0, 135.0)
SUBCLASS_DV = 5.0

COLLISION_CLASSES = ("C1", "C2", "C3", "C4", "C5", "C6")
SUBCLASSES = ("H", "M", "L")


@dataclass(frozen=True)
class RiskReport:
    min_ttc_s: float
    collision_count: int
    adv_raw: float
    adv_norm: float
    collision_types: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    @property
    def labels(self) -> list[str]:
        return [c + s for c, s in self.collision_types]


def _sweep_offsets() -> np.ndarray:
    n = int(round(T_MAX / TTC_STEP))
    return np.arange(n + 1) * TTC_STEP


def _first_contact(ego: dict, npc: dict, ext_e, ext_n) -> np.ndarray:
    """Sweep TTC for every row of the (already aligned) state arrays."""
    tau = _sweep_offsets()
    def future(a):
        vx = a["speed"] * np.cos(a["heading"])
        vy = a["speed"] * np.sin(a["heading"])
        return (a["x"][:, None] + vx[:, None] * tau,
                a["y"][:, None] + vy[:, None] * tau,
                np.broadcast_to(a["heading"][:, None], (len(a["x"]), len(tau))))
    ex, ey, eh = future(ego)
    nx, ny, nh = future(npc)
    # Bounding-circle prefilter; SAT only where the circles touch.
    reach = 0.5 * (math.hypot(*ext_e) + math.hypot(*ext_n))
    near = (ex - nx) ** 2 + (ey - ny) ** 2 <= reach * reach
    hit = np.zeros(near.shape, dtype=bool)
    if near.any():
        hit[near] = sat_overlap_batch(ex[near], ey[near], eh[near], ext_e[0], ext_e[1],
                                      nx[near], ny[near], nh[near], ext_n[0], ext_n[1])
    any_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    out = np.full(len(first), math.inf)
    out[any_hit] = np.round(tau[first[any_hit]], 9)
    return out


def _state_arrays(state: VehicleState) -> dict:
    return {k: np.array([getattr(state, k)], dtype=float) for k in ("x", "y", "heading", "speed")}


def ttc_at_step(ego: VehicleState, npc: VehicleState,
                ego_extent=DEFAULT_EXTENT, npc_extent=DEFAULT_EXTENT) -> float:
    """Constant-velocity sweep TTC between two vehicles; 0 if already in contact."""
    return float(_first_contact(_state_arrays(ego), _state_arrays(npc), ego_extent, npc_extent)[0])


def ttc_series(trace: SimulationTrace) -> np.ndarray:
    """Per-step TTC to the most threatening NPC (``inf`` where none closes in)."""
    if not trace.steps:
        raise ValueError("empty trace")
    ego = trace.actor_arrays("ego")
    ext_e = trace.extents.get("ego", DEFAULT_EXTENT)
    best = np.full(len(trace.steps), math.inf)
    for npc_id in trace.npc_ids:
        ttc = _first_contact(ego, trace.actor_arrays(npc_id), ext_e,
                             trace.extents.get(npc_id, DEFAULT_EXTENT))
        best = np.minimum(best, ttc)
    return best


def min_ttc(trace: SimulationTrace) -> float:
    """Scenario-wide minimum TTC, capped at ``T_MAX``."""
    if not trace.steps:
        raise ValueError("empty trace")
    m = float(ttc_series(trace).min()) if trace.npc_ids else math.inf
    return min(m, T_MAX)


def normalize_adv(adv_raw: float, c_max: int) -> float:
    span = max(c_max, 1) * P_COL + T_MAX
    return min(1.0, max(0.0, (adv_raw + T_MAX) / span))


def adv_score(collision_count: int, min_ttc_s: float, c_max: int) -> tuple[float, float]:
    """(raw, normalized) adversarial score: collisions times P_COL minus the minimum TTC."""
    raw = collision_count * P_COL - min_ttc_s
    return raw, normalize_adv(raw, c_max)


def adv(trace: SimulationTrace, c_max: int | None = None) -> RiskReport:
    """Risk report of a trace; ``c_max`` defaults to its NPC count."""
    m = min_ttc(trace)
    count = len(trace.collisions)
    c_max = len(trace.npc_ids) if c_max is None else c_max
    raw, norm = adv_score(count, m, c_max)
    return RiskReport(
        min_ttc_s=m,
        collision_count=count,
        adv_raw=raw,
        adv_norm=norm,
        collision_types=tuple(classify_collision(ev) for ev in trace.collisions),
    )


def subclass(dv: float) -> str:
    if dv > SUBCLASS_DV:
        return "H"
    if dv < -SUBCLASS_DV:
        return "L"
    return "M"


def classify_collision(ev: CollisionEvent) -> tuple[str, str]:
    """Map a collision to one of C1..C6 and a relative-speed subclass H/M/L.

    Crossing impacts (C6) take precedence, then cutoffs by a laterally
    moving NPC (C5), then the bearing sectors front/rear/left/right.
    """
    bx, by = ev.impact_point_ego_frame
    bearing = math.degrees(math.atan2(by, bx))
    rel = abs(math.degrees(ev.relative_heading))
    if CROSSING_DEG[0] <= rel <= CROSSING_DEG[1]:
        cls = "C6"
    elif abs(bearing) <= CUTOFF_BEARING_DEG and ev.npc_lateral_speed > CUTOFF_LATERAL_SPEED:
        cls = "C5"
    elif abs(bearing) <= FRONT_DEG:
        cls = "C1"
    elif abs(bearing) >= SIDE_DEG:
        cls = "C2"
    elif bearing > 0:
        cls = "C3"
    else:
        cls = "C4"
    return cls, subclass(ev.npc_speed - ev.ego_speed)
