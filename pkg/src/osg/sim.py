"""Deterministic fixed-step 2D kinematic traffic simulator.

The ego follows an IDM longitudinal policy along its route and never
changes lanes. NPCs are scripted from the concrete-scenario values; the
parameter names recognized by the scripts are:

``ego_init_speed``
    ego initial speed, also its IDM desired speed.
``npc_init_gap`` / ``npc_init_long_offset`` / ``npc2_init_long_offset``
    highway NPC placement (bumper gap ahead in the ego lane, or center
    offset relative to the ego along the road).
``npc_init_speed`` / ``npc_speed`` / ``npc2_speed``
    NPC initial (or constant) speed.
``brake_trigger_time``, ``brake_decel``
    the first NPC brakes from that time on.
``cutin_trigger_gap``, ``cutin_duration``, ``npc_target_speed``
    the first NPC cuts into the ego lane once it is ahead of the ego by at
    most the trigger gap (bumper to bumper).
``ego_init_dist_to_conflict``, ``npc_init_dist_to_conflict``
    junction placement, measured along each route to the conflict point.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from osg import maps
from osg.geometry import sat_overlap
from osg.scenario import ConcreteScenario, LogicalScenario, check_concrete


@dataclass(frozen=True)
class IDMParams:
    a_max: float = 2.0
    b_comfort: float = 4.0
    b_max: float = 9.0
    s0: float = 2.0
    time_headway: float = 1.5
    delta: int = 4


IDM = IDMParams()

# Service-brake limit of the ego actuator; IDM may ask for up to b_max but
# an ACC-style ego only delivers comfort deceleration.
EGO_MAX_DECEL = IDM.b_comfort
POST_COLLISION_S = 1.0
YIELD_WINDOW_S = 1.5
HIGHWAY_EGO_START = 200.0


def idm_accel(v: float, v0: float, gap: float, dv: float, p: IDMParams = IDM) -> float:
    """IDM acceleration, clamped to ``[-b_max, a_max]``.

    ``gap`` is the bumper-to-bumper distance to the leader (``math.inf``
    without one) and ``dv`` the approach rate ``v - v_leader``.
    """
    if gap <= 0.0:
        return -p.b_max
    if v0 <= 0.0:
        raise ValueError("desired speed must be positive")
    free = (v / v0) ** p.delta
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = p.s0 + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comfort)))
        interaction = (s_star / gap) ** 2
    acc = p.a_max * (1.0 - free - interaction)
    return min(p.a_max, max(-p.b_max, acc))


@dataclass(frozen=True)
class VehicleState:
    actor_id: str
    x: float
    y: float
    heading: float
    speed: float
    lane: int | str


@dataclass(frozen=True)
class Step:
    time: float
    states: tuple[VehicleState, ...]


@dataclass(frozen=True)
class CollisionEvent:
    time_s: float
    npc_id: str
    impact_point_ego_frame: tuple[float, float]
    ego_speed: float
    npc_speed: float
    relative_heading: float
    npc_lateral_speed: float = 0.0


@dataclass(frozen=True)
class SimulationTrace:
    ls_id: str
    dt_s: float
    steps: tuple[Step, ...]
    collisions: tuple[CollisionEvent, ...]
    ego_distance_m: float
    sim_time_s: float
    extents: dict = field(default_factory=dict)  # actor_id -> (length, width)
    npc_ids: tuple[str, ...] = ()

    def actor_arrays(self, actor_id: str) -> dict[str, np.ndarray]:
        """Per-step x, y, heading, speed of one actor as arrays."""
        idx = next(i for i, s in enumerate(self.steps[0].states) if s.actor_id == actor_id)
        rows = np.array([(st.states[idx].x, st.states[idx].y, st.states[idx].heading,
                          st.states[idx].speed) for st in self.steps])
        return {"x": rows[:, 0], "y": rows[:, 1], "heading": rows[:, 2], "speed": rows[:, 3]}

    @property
    def has_collision(self) -> bool:
        return bool(self.collisions)


# ---------------------------------------------------------------------------
# agents

class _Ego:
    def __init__(self, actor_id, tpl, path, s, v, v0):
        self.id = actor_id
        self.length, self.width = tpl.length_m, tpl.width_m
        self.path = path
        self.route = tpl.route
        self.s, self.v, self.v0 = s, v, v0
        self.s_start = s
        self.yielding: set[str] = set()
        self._acc = 0.0
        self.wrecked = False

    def wreck(self) -> None:
        self.v, self._acc, self.wrecked = 0.0, 0.0, True

    def pose(self):
        return self.path.pose(self.s)

    def state(self, lane) -> VehicleState:
        x, y, h = self.pose()
        return VehicleState(self.id, x, y, h, self.v, lane)

    def plan(self, world: "_World", t: float) -> None:
        x, y, h = self.pose()
        c, s = math.cos(h), math.sin(h)
        acc = idm_accel(self.v, self.v0, math.inf, 0.0)
        for npc in world.npcs:
            nx, ny, nh, nv = npc.kinematics()
            dx = (nx - x) * c + (ny - y) * s
            dy = -(nx - x) * s + (ny - y) * c
            dh = maps.wrap_angle(nh - h)
            if dx > 0 and abs(dy) < 0.5 * (maps.LANE_WIDTH + npc.width) and abs(dh) < math.pi / 3:
                gap = dx - 0.5 * (self.length + npc.length)
                acc = min(acc, idm_accel(self.v, self.v0, gap, self.v - nv * math.cos(dh)))
            virtual = self._virtual_leader_gap(npc)
            if virtual is not None:
                acc = min(acc, idm_accel(self.v, self.v0, virtual, self.v))
        self._acc = acc

    def _virtual_leader_gap(self, npc) -> float | None:
        # Junction yielding against NPCs whose conflict-zone occupancy
        # overlaps the ego's own arrival window.
        if npc.conflict is None:
            return None
        s_ce, s_cn = npc.conflict
        npc_clear = 0.5 * npc.length + 0.5 * self.width
        d_n_in = s_cn - npc.s - npc_clear
        d_n_out = s_cn - npc.s + npc_clear
        if d_n_out <= 0.0:
            self.yielding.discard(npc.id)
            return None
        stop_gap = (s_ce - self.s) - 0.5 * self.length - 0.5 * npc.width - 1.0
        if npc.id not in self.yielding:
            # Past the point of stopping comfortably: commit to the crossing.
            if stop_gap <= 0.0 or self.v * self.v / (2.0 * EGO_MAX_DECEL) > stop_gap:
                return None
            t_e = (s_ce - self.s) / self.v if self.v > 1e-9 else math.inf
            v_n = max(npc.v, 1e-9)
            t_in, t_out = d_n_in / v_n, d_n_out / v_n
            if t_in <= t_e + YIELD_WINDOW_S and t_out >= t_e - YIELD_WINDOW_S:
                self.yielding.add(npc.id)
            else:
                return None
        return stop_gap

    def advance(self, dt: float) -> None:
        if self.wrecked:
            return
        self.s += self.v * dt
        self.v = max(0.0, self.v + max(self._acc, -EGO_MAX_DECEL) * dt)


class _HighwayNpc:
    def __init__(self, actor_id, tpl, lane, x, v, script):
        self.id = actor_id
        self.length, self.width = tpl.length_m, tpl.width_m
        self.lane = lane
        self.x, self.v = x, v
        self.lat = 0.0  # lateral offset from own lane center
        self.vlat = 0.0
        self.script = script
        self.phase = "cruise"
        self.t_start = 0.0
        self.v_start = v
        self.conflict = None
        self._next = None
        self.wrecked = False
        self._heading = 0.0

    def wreck(self) -> None:
        self._heading = math.atan2(self.vlat, self.v)
        self.v, self.vlat, self.wrecked = 0.0, 0.0, True

    def kinematics(self):
        y = self.lane * maps.LANE_WIDTH + self.lat
        h = self._heading if self.wrecked else math.atan2(self.vlat, self.v)
        return self.x, y, h, self.v

    def state(self) -> VehicleState:
        x, y, h, v = self.kinematics()
        lane = int(round(y / maps.LANE_WIDTH))
        return VehicleState(self.id, x, y, h, math.hypot(v, self.vlat), lane)

    def plan(self, world: "_World", t: float) -> None:
        sc = self.script
        dt = world.dt
        v_next, lat_next, vlat_next = self.v, self.lat, 0.0
        if sc.get("brake_time") is not None and t + 1e-9 >= sc["brake_time"]:
            v_next = max(0.0, self.v - sc["brake_decel"] * dt)
        if sc.get("cutin") and self.phase == "cruise":
            ego = world.ego
            ex = ego.pose()[0]
            gap = self.x - ex - 0.5 * (self.length + ego.length)
            if 0.0 <= gap <= sc["trigger_gap"]:
                self.phase, self.t_start, self.v_start = "lc", t, self.v
        if self.phase == "lc":
            dur = sc["duration"]
            u = min(1.0, (t + dt - self.t_start) / dur)
            shift = sc["lateral_shift"]
            lat_next = shift * (3 * u * u - 2 * u ** 3)
            vlat_next = shift * 6 * u * (1 - u) / dur
            v_next = self.v_start + (sc["target_speed"] - self.v_start) * u
            if u >= 1.0:
                self.phase = "done"
        self._next = (v_next, lat_next, vlat_next)

    def advance(self, dt: float) -> None:
        if self.wrecked:
            return
        self.x += self.v * dt
        self.v, self.lat, self.vlat = self._next


class _JunctionNpc:
    def __init__(self, actor_id, tpl, path, s, v, conflict):
        self.id = actor_id
        self.length, self.width = tpl.length_m, tpl.width_m
        self.path = path
        self.route = tpl.route
        self.s, self.v = s, v
        self.conflict = conflict  # (s on ego route, s on own route) or None
        self.wrecked = False

    def wreck(self) -> None:
        self.v, self.wrecked = 0.0, True

    def kinematics(self):
        x, y, h = self.path.pose(self.s)
        return x, y, h, self.v

    def state(self) -> VehicleState:
        x, y, h, v = self.kinematics()
        return VehicleState(self.id, x, y, h, v, self.route)

    def plan(self, world, t):
        pass

    def advance(self, dt: float) -> None:
        self.s += self.v * dt


@dataclass
class _World:
    ls: LogicalScenario
    dt: float
    ego: _Ego
    npcs: list


def _npc_param(p: dict, k: int, name: str, default=None):
    prefix = "npc_" if k == 1 else f"npc{k}_"
    return p.get(prefix + name, default)


def _build(ls: LogicalScenario, p: dict) -> _World:
    routes = maps.routes(ls.map_template)
    ego_tpl = ls.ego
    v_ego = float(p.get("ego_init_speed", 15.0))
    npcs = []
    if maps.is_highway(ls.map_template):
        ego = _Ego("ego", ego_tpl, routes[ego_tpl.route], HIGHWAY_EGO_START, v_ego, v_ego)
        ego_lane = maps.lane_index(ego_tpl.route)
        for k, tpl in enumerate(ls.npcs, start=1):
            lane = maps.lane_index(tpl.route)
            if _npc_param(p, k, "init_gap") is not None:
                offset = _npc_param(p, k, "init_gap") + 0.5 * (tpl.length_m + ego_tpl.length_m)
            else:
                offset = _npc_param(p, k, "init_long_offset", 30.0)
            speed = _npc_param(p, k, "init_speed", _npc_param(p, k, "speed", v_ego))
            script = {}
            if k == 1 and "brake_trigger_time" in p:
                script["brake_time"] = p["brake_trigger_time"]
                script["brake_decel"] = p.get("brake_decel", 6.0)
            if k == 1 and "cutin_trigger_gap" in p and lane != ego_lane:
                script.update(
                    cutin=True,
                    trigger_gap=p["cutin_trigger_gap"],
                    duration=p.get("cutin_duration", 3.0),
                    target_speed=p.get("npc_target_speed", speed),
                    lateral_shift=(ego_lane - lane) * maps.LANE_WIDTH,
                )
            npcs.append(_HighwayNpc(f"npc{k}", tpl, lane, HIGHWAY_EGO_START + offset, speed, script))
    else:
        ego_path = routes[ego_tpl.route]
        first_conflict = None
        specs = []
        for k, tpl in enumerate(ls.npcs, start=1):
            conflict = maps.conflict_point(ls.map_template, ego_tpl.route, tpl.route)
            specs.append((k, tpl, conflict))
            if first_conflict is None and conflict is not None:
                first_conflict = conflict
        d_ego = float(p.get("ego_init_dist_to_conflict", 40.0))
        s_ego = (first_conflict[0] if first_conflict else maps.ARM_LENGTH) - d_ego
        ego = _Ego("ego", ego_tpl, ego_path, s_ego, v_ego, v_ego)
        for k, tpl, conflict in specs:
            d_npc = float(_npc_param(p, k, "init_dist_to_conflict", 40.0))
            s_c = conflict[1] if conflict else maps.ARM_LENGTH
            speed = _npc_param(p, k, "speed", _npc_param(p, k, "init_speed", 10.0))
            npcs.append(_JunctionNpc(f"npc{k}", tpl, routes[tpl.route], s_c - d_npc, speed, conflict))
    return _World(ls, ls.dt_s, ego, npcs)


def _ego_lane(world: _World):
    if maps.is_highway(world.ls.map_template):
        return maps.lane_index(world.ego.route)
    return world.ego.route


def _check_collisions(world: _World, t: float, hit: set, events: list) -> None:
    """Record first contacts at time ``t``; colliding vehicles come to rest."""
    ego = world.ego
    wrecks = []
    ex, ey, eh = ego.pose()
    rect_e = (ex, ey, eh, ego.length, ego.width)
    for npc in world.npcs:
        if npc.id in hit:
            continue
        nx, ny, nh, nv = npc.kinematics()
        if sat_overlap(rect_e, (nx, ny, nh, npc.length, npc.width)):
            hit.add(npc.id)
            wrecks.append(npc)
            c, s = math.cos(eh), math.sin(eh)
            impact = ((nx - ex) * c + (ny - ey) * s, -(nx - ex) * s + (ny - ey) * c)
            vlat = getattr(npc, "vlat", 0.0)
            events.append(CollisionEvent(
                time_s=t,
                npc_id=npc.id,
                impact_point_ego_frame=impact,
                ego_speed=ego.v,
                npc_speed=math.hypot(nv, vlat),
                relative_heading=maps.wrap_angle(nh - eh),
                npc_lateral_speed=abs(vlat),
            ))
    if wrecks:
        ego.wreck()
        for npc in wrecks:
            npc.wreck()


def simulate(ls: LogicalScenario, cs: ConcreteScenario) -> SimulationTrace:
    """Run one concrete scenario to the horizon (or 1 s past the first collision)."""
    check_concrete(ls, cs)
    world = _build(ls, cs.as_dict(ls))
    dt = ls.dt_s
    n_steps = ls.n_steps
    post_steps = int(round(POST_COLLISION_S / dt))
    lane = _ego_lane(world)
    steps, events, hit = [], [], set()
    stop_at = n_steps
    k = 0
    while True:
        t = k * dt
        steps.append(Step(t, (world.ego.state(lane),) + tuple(n.state() for n in world.npcs)))
        _check_collisions(world, t, hit, events)
        if events and stop_at == n_steps:
            stop_at = min(n_steps, k + post_steps)
        if k >= stop_at:
            break
        if not world.ego.wrecked:
            world.ego.plan(world, t)
        for npc in world.npcs:
            if not npc.wrecked:
                npc.plan(world, t)
        world.ego.advance(dt)
        for npc in world.npcs:
            npc.advance(dt)
        k += 1
    extents = {"ego": (world.ego.length, world.ego.width)}
    extents.update({n.id: (n.length, n.width) for n in world.npcs})
    return SimulationTrace(
        ls_id=ls.id,
        dt_s=dt,
        steps=tuple(steps),
        collisions=tuple(events),
        ego_distance_m=world.ego.s - world.ego.s_start,
        sim_time_s=(len(steps) - 1) * dt,
        extents=extents,
        npc_ids=tuple(n.id for n in world.npcs),
    )


TRACE_COLUMNS = ("time", "actor_id", "x", "y", "heading", "speed", "lane")
COLLISION_COLUMNS = ("time", "npc_id", "impact_x", "impact_y", "ego_speed",
                     "npc_speed", "relative_heading", "npc_lateral_speed")


def export_trace(trace: SimulationTrace) -> str:
    """Render a trace as CSV: one row per (step, actor), then a collision block."""
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for st in trace.steps:
        for v in st.states:
            buf.write(f"{st.time:.2f},{v.actor_id},{v.x:.6f},{v.y:.6f},"
                      f"{v.heading:.6f},{v.speed:.6f},{v.lane}\n")
    buf.write("# collisions\n")
    buf.write(",".join(COLLISION_COLUMNS) + "\n")
    for ev in trace.collisions:
        ix, iy = ev.impact_point_ego_frame
        buf.write(f"{ev.time_s:.2f},{ev.npc_id},{ix:.6f},{iy:.6f},{ev.ego_speed:.6f},"
                  f"{ev.npc_speed:.6f},{ev.relative_heading:.6f},{ev.npc_lateral_speed:.6f}\n")
    return buf.getvalue()
