"""Trajectory ingestion, event extraction and the synthetic traffic generator.

Trajectory points follow the NGSIM convention: ``coords = (Local_X,
Local_Y)`` with Local_Y the longitudinal position on highways. Junction
data uses the same columns as plain planar coordinates.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from osg import maps
from osg.scenario import ConcreteScenario, LogicalScenario, ParameterSpec
from osg.sim import simulate

log = logging.getLogger(__name__)

FEET_TO_M = 0.3048
FRAME_RATE_HZ = 10.0
EVENT_WINDOW_S = 5.0
VEHICLE_LENGTH = 4.5

NGSIM_SCHEMA = {
    "vehicle_id": "Vehicle_ID",
    "frame": "Frame_ID",
    "x": "Local_X",
    "y": "Local_Y",
    "speed": "v_Vel",
    "lane": "Lane_ID",
    "front": "Preceding",
    "rear": "Following",
}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPoint:
    coords: tuple[float, float]
    speed: float
    lane: int
    front_id: int | None
    rear_id: int | None
    time: float
    vehicle_id: int


@dataclass(frozen=True)
class EventSample:
    features: tuple[float, ...]
    source_window: tuple[float, float]


# ---------------------------------------------------------------------------
# CSV

def _neighbor(raw: str) -> int | None:
    v = int(float(raw))
    return v if v > 0 else None


def ingest_csv(path, schema: dict | None = None, feet: bool = False,
               frame_rate: float = FRAME_RATE_HZ) -> tuple[list[TrajectoryPoint], int]:
    """Parse a trajectory CSV; returns ``(points, skipped_row_count)``."""
    schema = dict(NGSIM_SCHEMA if schema is None else schema)
    scale = FEET_TO_M if feet else 1.0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise ValueError(f"{path}: empty file")
        missing = [col for col in schema.values() if col not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        points, skipped = [], 0
        for row in reader:
            try:
                speed = float(row[schema["speed"]]) * scale
                x = float(row[schema["x"]]) * scale
                y = float(row[schema["y"]]) * scale
                frame = int(float(row[schema["frame"]]))
                pt = TrajectoryPoint(
                    coords=(x, y),
                    speed=speed,
                    lane=int(float(row[schema["lane"]])),
                    front_id=_neighbor(row[schema["front"]]),
                    rear_id=_neighbor(row[schema["rear"]]),
                    time=frame / frame_rate,
                    vehicle_id=int(float(row[schema["vehicle_id"]])),
                )
            except (TypeError, ValueError):
                skipped += 1
                continue
            if not (math.isfinite(speed) and math.isfinite(x) and math.isfinite(y)) or speed < 0 or pt.time < 0:
                skipped += 1
                continue
            points.append(pt)
    if not points and skipped == 0:
        raise ValueError(f"{path}: no data rows")
    if skipped:
        log.warning("%s: skipped %d unparsable rows", path, skipped)
    return points, skipped


def write_csv(points, path, frame_rate: float = FRAME_RATE_HZ) -> None:
    """Write points in the default NGSIM column layout (SI units)."""
    cols = list(NGSIM_SCHEMA.values())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for p in points:
            w.writerow([p.vehicle_id, int(round(p.time * frame_rate)), f"{p.coords[0]:.4f}",
                        f"{p.coords[1]:.4f}", f"{p.speed:.4f}", p.lane, p.front_id or 0, p.rear_id or 0])


# ---------------------------------------------------------------------------
# columnar view

@dataclass
class _Track:
    vid: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    lane: np.ndarray
    front: list
    rear: list

    def index(self, time: float) -> int | None:
        i = int(np.searchsorted(self.t, time - 1e-6))
        if i < len(self.t) and abs(self.t[i] - time) < 1e-6:
            return i
        return None

    @property
    def start(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        return float(self.t[-1])


def _tracks(points) -> dict[int, _Track]:
    by_vid = defaultdict(list)
    for p in points:
        by_vid[p.vehicle_id].append(p)
    out = {}
    for vid, pts in by_vid.items():
        pts.sort(key=lambda p: p.time)
        out[vid] = _Track(
            vid=vid,
            t=np.array([p.time for p in pts]),
            x=np.array([p.coords[0] for p in pts]),
            y=np.array([p.coords[1] for p in pts]),
            speed=np.array([p.speed for p in pts]),
            lane=np.array([p.lane for p in pts]),
            front=[p.front_id for p in pts],
            rear=[p.rear_id for p in pts],
        )
    return out


def scenario_kind(ls: LogicalScenario) -> str | None:
    names = set(ls.names)
    if "brake_trigger_time" in names:
        return "brake"
    if "cutin_trigger_gap" in names:
        return "cutin"
    if "ego_init_dist_to_conflict" in names:
        return "junction"
    return None


# ---------------------------------------------------------------------------
# event predicates

BRAKE_DECEL_MIN = 2.0
BRAKE_SUSTAIN_S = 1.0
CUTIN_REAR_RANGE = 60.0
LATERAL_REST_SPEED = 0.2
JUNCTION_ARRIVAL_GAP_S = 5.0


def _in_box(features, ls: LogicalScenario) -> bool:
    return all(p.lower <= f <= p.upper for p, f in zip(ls.parameters, features))


def _window(t_star: float) -> tuple[float, float]:
    return (t_star - EVENT_WINDOW_S, t_star + EVENT_WINDOW_S)


def _brake_events(tracks, ls):
    out = []
    for lead in tracks.values():
        if len(lead.t) < 3:
            continue
        dt = np.diff(lead.t)
        acc = np.diff(lead.speed) / dt
        braking = acc <= -BRAKE_DECEL_MIN
        i = 0
        while i < len(braking):
            if not braking[i]:
                i += 1
                continue
            j = i
            while j + 1 < len(braking) and braking[j + 1]:
                j += 1
            t_star, t_stop = lead.t[i], lead.t[j + 1]
            run = (i, j)
            i = j + 1
            if t_stop - t_star < BRAKE_SUSTAIN_S - 1e-9:
                continue
            fid = lead.rear[run[0]]
            if fid is None or fid not in tracks:
                continue
            fol = tracks[fid]
            # pairing start: earliest contiguous frame where fol follows lead
            t0 = max(t_star - EVENT_WINDOW_S, fol.start, lead.start)
            k = lead.index(t_star)
            while k > 0 and lead.t[k - 1] >= t0 - 1e-9 and lead.rear[k - 1] == fid:
                k -= 1
            t0 = lead.t[k]
            kf = fol.index(t0)
            if kf is None:
                continue
            decel = (lead.speed[run[0]] - lead.speed[run[1] + 1]) / (t_stop - t_star)
            feats = {
                "ego_init_speed": fol.speed[kf],
                "npc_init_gap": lead.y[k] - fol.y[kf] - VEHICLE_LENGTH,
                "npc_init_speed": lead.speed[k],
                "brake_trigger_time": t_star - t0,
                "brake_decel": decel,
            }
            out.append((feats, _window(t_star)))
    return out


def _lateral_rest(track: _Track, i: int, direction: int) -> int:
    """Walk from frame ``i`` until lateral motion stops."""
    vlat = np.gradient(track.x, track.t) if len(track.t) > 1 else np.zeros(1)
    k = i
    while 0 < k < len(track.t) - 1 and abs(vlat[k]) > LATERAL_REST_SPEED:
        k += direction
    return k


def _cutin_events(tracks, ls):
    out = []
    need_second = "npc2_speed" in ls.names or "npc2_init_long_offset" in ls.names
    for veh in tracks.values():
        changes = np.flatnonzero(veh.lane[1:] != veh.lane[:-1]) + 1
        for i in changes:
            t_star = veh.t[i]
            rid = veh.rear[i]
            if rid is None or rid not in tracks:
                continue
            rear = tracks[rid]
            ri = rear.index(t_star)
            if ri is None or not 0.0 <= veh.y[i] - rear.y[ri] <= CUTIN_REAR_RANGE:
                continue
            on = _lateral_rest(veh, i, -1)
            end = _lateral_rest(veh, i, +1)
            t0 = max(t_star - EVENT_WINDOW_S, veh.start, rear.start)
            k, kr, kr_on = veh.index(t0), rear.index(t0), rear.index(veh.t[on])
            if k is None or kr is None or kr_on is None:
                continue
            feats = {
                "ego_init_speed": rear.speed[kr],
                "npc_init_long_offset": veh.y[k] - rear.y[kr],
                "npc_init_speed": veh.speed[k],
                "cutin_trigger_gap": veh.y[on] - rear.y[kr_on] - VEHICLE_LENGTH,
                "cutin_duration": veh.t[end] - veh.t[on],
                "npc_target_speed": veh.speed[end],
            }
            if need_second:
                n2id = veh.rear[i - 1]
                n2 = tracks.get(n2id) if n2id is not None else None
                k2 = n2.index(t0) if n2 is not None else None
                if k2 is None:
                    continue
                feats["npc2_init_long_offset"] = n2.y[k2] - rear.y[kr]
                feats["npc2_speed"] = n2.speed[k2]
            out.append((feats, _window(t_star)))
    return out


def _heading_change(track: _Track) -> float:
    h0 = math.atan2(track.y[min(5, len(track.y) - 1)] - track.y[0], track.x[min(5, len(track.x) - 1)] - track.x[0])
    h1 = math.atan2(track.y[-1] - track.y[max(-6, -len(track.y))], track.x[-1] - track.x[max(-6, -len(track.x))])
    return math.degrees(maps.wrap_angle(h1 - h0)), h0


def _move(delta_deg: float) -> str:
    if abs(delta_deg) < 30:
        return "straight"
    return "left" if delta_deg > 0 else "right"


def _arc_lengths(track: _Track) -> np.ndarray:
    seg = np.hypot(np.diff(track.x), np.diff(track.y))
    return np.concatenate([[0.0], np.cumsum(seg)])


def _route_signature(ls: LogicalScenario):
    ego, npc = ls.ego.route, ls.npcs[0].route
    arms = ("south", "east", "north", "west")
    e_arm, e_move = ego.split("_")
    n_arm, n_move = npc.split("_")
    rel = (arms.index(n_arm) - arms.index(e_arm)) * 90.0
    return e_move, n_move, math.degrees(maps.wrap_angle(math.radians(rel)))


def _junction_events(tracks, ls, tol: float = 0.5):
    out = []
    e_move, n_move, rel_entry = _route_signature(ls)
    infos = {}
    for tr in tracks.values():
        if len(tr.t) < 12:
            continue
        delta, h0 = _heading_change(tr)
        infos[tr.vid] = (_move(delta), h0, _arc_lengths(tr))
    order = sorted(infos, key=lambda v: (tracks[v].start, v))
    pairs = []
    for i, va in enumerate(order):
        for vb in order[i + 1:]:
            if tracks[vb].start > tracks[va].end:
                break
            pairs += [(va, vb), (vb, va)]
    for va, vb in pairs:
        a, b = tracks[va], tracks[vb]
        move_a, h0a, sa = infos[va]
        move_b, h0b, sb = infos[vb]
        if move_a != e_move or move_b != n_move:
            continue
        rel = math.degrees(maps.wrap_angle(h0b - h0a))
        if abs(math.degrees(maps.wrap_angle(math.radians(rel - rel_entry)))) > 30:
            continue
        d2 = (a.x[:, None] - b.x[None, :]) ** 2 + (a.y[:, None] - b.y[None, :]) ** 2
        ia_hits = np.flatnonzero(d2.min(axis=1) < tol * tol)
        if ia_hits.size == 0:
            continue
        ka = int(ia_hits[0])
        kb = int(d2[ka].argmin())
        t_a, t_b = a.t[ka], b.t[kb]
        if abs(t_a - t_b) >= JUNCTION_ARRIVAL_GAP_S:
            continue
        t_star = min(t_a, t_b)
        t0 = max(t_star - EVENT_WINDOW_S, a.start, b.start)
        k0a, k0b = a.index(t0), b.index(t0)
        if k0a is None or k0b is None:
            continue
        mean_b = (sb[kb] - sb[k0b]) / (t_b - t0) if t_b > t0 else b.speed[k0b]
        feats = {
            "ego_init_speed": a.speed[k0a],
            "ego_init_dist_to_conflict": sa[ka] - sa[k0a],
            "npc_init_dist_to_conflict": sb[kb] - sb[k0b],
            "npc_speed": mean_b,
        }
        out.append((feats, _window(t_star)))
    return out


_FINDERS = {"brake": _brake_events, "cutin": _cutin_events, "junction": _junction_events}


def extract_events(points, ls: LogicalScenario) -> list[EventSample]:
    """Critical-event samples of ``ls`` found in ``points`` (features in LS order)."""
    kind = scenario_kind(ls)
    if kind is None or not points:
        return []
    tracks = _tracks(points)
    samples = []
    for feats, window in _FINDERS[kind](tracks, ls):
        try:
            vec = tuple(float(feats[name]) for name in ls.names)
        except KeyError:
            continue
        if all(math.isfinite(v) for v in vec) and _in_box(vec, ls):
            samples.append(EventSample(vec, window))
    return samples


# ---------------------------------------------------------------------------
# synthetic traffic

# Natural driving priors. Spread is chosen so that roughly 5-10 % of the
# extracted features fall outside the catalog boxes.
_PRIORS = {
    "brake": {
        "ego_init_speed": ("normal", 20.0, 3.5),
        "npc_init_gap": ("headway", 1.45, 0.35),
        "npc_init_speed": ("relative", "ego_init_speed", 3.0),
        "brake_trigger_time": ("uniform", 1.0, 5.0),
        "brake_decel": ("shifted_exp", 2.2, 1.5),
    },
    "cutin": {
        "ego_init_speed": ("normal", 20.0, 3.5),
        "npc_init_long_offset": ("uniform", 10.0, 40.0),
        "npc_init_speed": ("relative", "ego_init_speed", 3.0),
        "cutin_trigger_gap": ("normal", 25.0, 6.0),
        "cutin_duration": ("normal", 3.0, 0.8),
        "npc_target_speed": ("relative", "npc_init_speed", 2.0),
        "npc2_init_long_offset": ("uniform", -35.0, -5.0),
        "npc2_speed": ("relative", "ego_init_speed", 3.0),
    },
    "junction": {
        "ego_init_speed": ("normal", 9.5, 2.0),
        "ego_init_dist_to_conflict": ("uniform", 25.0, 55.0),
        "npc_init_dist_to_conflict": ("uniform", 25.0, 55.0),
        "npc_speed": ("normal", 11.0, 2.5),
    },
}

# Episodes are laid out in disjoint time blocks so that tracks of different
# episodes never overlap in time.
_EPISODE_BLOCK_S = 40.0
_EPISODE_HORIZON_S = 15.0


def _sample_prior(kind: str, names, rng: np.random.Generator) -> dict:
    terms = _PRIORS[kind]
    out = {}
    for name in names:
        spec = terms[name]
        form = spec[0]
        if form == "normal":
            out[name] = rng.normal(spec[1], spec[2])
        elif form == "uniform":
            out[name] = rng.uniform(spec[1], spec[2])
        elif form == "relative":
            out[name] = out[spec[1]] + rng.normal(0.0, spec[2])
        elif form == "headway":
            out[name] = out["ego_init_speed"] * rng.lognormal(math.log(spec[1]), spec[2])
        elif form == "shifted_exp":
            out[name] = spec[1] + rng.exponential(spec[2])
    return out


def _relaxed(ls: LogicalScenario) -> LogicalScenario:
    # Wide boxes so prior samples outside the catalog box can still be simulated.
    params = tuple(
        ParameterSpec(p.name, p.lower - p.width, p.upper + p.width, p.unit, p.description)
        for p in ls.parameters
    )
    return dataclasses.replace(ls, parameters=params, horizon_s=_EPISODE_HORIZON_S)


def _physical(kind: str, v: dict) -> bool:
    speeds = [v[k] for k in v if k.endswith("speed")]
    if any(s <= 0.5 for s in speeds):
        return False
    if kind == "brake":
        return v["npc_init_gap"] > 2.0 and v["brake_trigger_time"] > 0.2 and v["brake_decel"] > 0.0
    if kind == "cutin":
        return v["cutin_trigger_gap"] > 0.0 and v["cutin_duration"] > 0.5
    return v["ego_init_dist_to_conflict"] > 5.0 and v["npc_init_dist_to_conflict"] > 5.0


def _neighbors(frame_states, n_lanes: int):
    """Front/rear vehicle ids per actor for one highway frame."""
    res = {}
    for aid, (x, y, _lane) in frame_states.items():
        lane = _lane
        ahead = [(ox - x, oid) for oid, (ox, oy, ol) in frame_states.items() if oid != aid and ol == lane and ox > x]
        behind = [(x - ox, oid) for oid, (ox, oy, ol) in frame_states.items() if oid != aid and ol == lane and ox <= x]
        res[aid] = (min(ahead)[1] if ahead else None, min(behind)[1] if behind else None)
    return res


def _episode_points(ls, trace, base_vid: int, t_offset: float) -> list[TrajectoryPoint]:
    ids = {aid: base_vid + i for i, aid in enumerate(["ego", *trace.npc_ids])}
    highway = maps.is_highway(ls.map_template)
    n_lanes = int(ls.map_template[-1]) if highway else 0
    pts = []
    for st in trace.steps:
        t = round(st.time + t_offset, 6)
        if highway:
            frame = {ids[v.actor_id]: (v.x, v.y, int(round(v.y / maps.LANE_WIDTH))) for v in st.states}
            nb = _neighbors(frame, n_lanes)
        for v in st.states:
            vid = ids[v.actor_id]
            if highway:
                lane_id = n_lanes - frame[vid][2]  # NGSIM: lane 1 is leftmost
                front, rear = nb[vid]
                # NGSIM layout: Local_X lateral, Local_Y longitudinal
                pts.append(TrajectoryPoint((v.y, v.x), v.speed, lane_id, front, rear, t, vid))
            else:
                pts.append(TrajectoryPoint((v.x, v.y), v.speed, 0, None, None, t, vid))
    return pts


def synthesize(ls: LogicalScenario, n_events: int, seed: int = 0,
               max_tries_factor: int = 20) -> list[TrajectoryPoint]:
    """Synthetic natural traffic containing ``n_events`` critical events of ``ls``.

    Each episode draws natural parameters from a fixed driving prior,
    simulates them with the built-in simulator (the ego slot is an IDM
    driver) and keeps only collision-free episodes whose event actually
    occurs. Trajectories are emitted in NGSIM layout.
    """
    kind = scenario_kind(ls)
    if kind is None:
        raise ValueError(f"{ls.id}: no synthetic traffic model for these parameters")
    rng = np.random.default_rng(seed)
    relaxed = _relaxed(ls)
    points: list[TrajectoryPoint] = []
    produced, tries = 0, 0
    while produced < n_events:
        tries += 1
        if tries > max_tries_factor * max(n_events, 1):
            raise RuntimeError(f"{ls.id}: synthetic generator produced only {produced} events")
        v = _sample_prior(kind, ls.names, rng)
        if not _physical(kind, v) or not all(
                p.lower <= v[p.name] <= p.upper for p in relaxed.parameters):
            continue
        cs = ConcreteScenario(ls.id, tuple(float(v[n]) for n in ls.names), seed)
        trace = simulate(relaxed, cs)
        if trace.collisions:
            continue
        episode = _episode_points(ls, trace, base_vid=10 * produced + 1,
                                  t_offset=produced * _EPISODE_BLOCK_S)
        if len(_FINDERS[kind](_tracks(episode), ls)) != 1:
            continue
        points.extend(episode)
        produced += 1
    return points
