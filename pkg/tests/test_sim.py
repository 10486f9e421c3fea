import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from osg.geometry import corners, sat_overlap
from osg.risk import T_MAX
from osg.scenario import ConcreteScenario, catalog_entry, clamp_to_box, parse_scenario_config
from osg.sim import IDM, export_trace, idm_accel, simulate

FOLLOW = """
id = "Follow"
map_template = "highway2"
horizon_s = 60.0

[[parameter]]
name = "ego_init_speed"
lower = 5.0
upper = 30.0

[[parameter]]
name = "npc_init_gap"
lower = 5.0
upper = 100.0

[[parameter]]
name = "npc_init_speed"
lower = 5.0
upper = 30.0

[[actor]]
role = "ego"
route = "lane0"
behavior = "idm_ego"

[[actor]]
role = "npc"
route = "lane0"
behavior = "scripted_npc"
"""


def cs_for(ls, **values):
    return ConcreteScenario(ls.id, tuple(float(values[n]) for n in ls.names))


# -- IDM ---------------------------------------------------------------------

def test_idm_cruise_at_desired_speed():
    assert abs(idm_accel(20.0, 20.0, math.inf, 0.0)) < 1e-9


def test_idm_free_road_start():
    assert idm_accel(0.0, 20.0, math.inf, 0.0) == pytest.approx(2.0)


def test_idm_closing_on_leader_brakes():
    s_star = 2.0 + 20 * 1.5 + 20 * 10 / (2 * math.sqrt(8.0))
    expected = max(-9.0, 2.0 * (1 - 1 - (s_star / 30) ** 2))
    assert idm_accel(20.0, 20.0, 30.0, 10.0) == pytest.approx(expected)
    assert expected < 0


@pytest.mark.parametrize("gap", [0.0, -1.0])
def test_idm_emergency_on_contact(gap):
    assert idm_accel(10.0, 20.0, gap, 0.0) == -IDM.b_max


@given(st.floats(0, 40), st.floats(1, 40), st.floats(0.01, 500), st.floats(-30, 30))
def test_idm_is_clamped(v, v0, gap, dv):
    assert -IDM.b_max <= idm_accel(v, v0, gap, dv) <= IDM.a_max


# -- separating axes -----------------------------------------------------------

def rect(x, y=0.0, h=0.0):
    return (x, y, h, 4.5, 2.0)


def test_sat_identical():
    assert sat_overlap(rect(0), rect(0))


def test_sat_far_apart():
    assert not sat_overlap(rect(0), rect(10))


def test_sat_just_overlapping():
    assert sat_overlap(rect(0), rect(4.4))
    assert not sat_overlap(rect(0), rect(4.6))


def test_sat_rotated_cases():
    # a car crossing at right angles in front: half length 2.25 + half width 1.0
    assert sat_overlap(rect(0), rect(3.2, 0, math.pi / 2))
    assert not sat_overlap(rect(0), rect(3.3, 0, math.pi / 2))
    # bounding boxes overlap, but an axis of the rotated car separates them
    assert not sat_overlap(rect(0), rect(3.3, 3.2, math.pi / 4))


def _inside(pts, r):
    x, y, h, length, width = r
    d = pts - (x, y)
    u = d[:, 0] * math.cos(h) + d[:, 1] * math.sin(h)
    v = -d[:, 0] * math.sin(h) + d[:, 1] * math.cos(h)
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


@settings(max_examples=200)
@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(-math.pi, math.pi))
def test_sat_matches_point_sampling(x, y, h):
    a, b = rect(0), rect(x, y, h)
    grid = np.stack(np.meshgrid(np.linspace(-2.25, 2.25, 91),
                                np.linspace(-1, 1, 41)), -1).reshape(-1, 2)
    sampled = bool(_inside(grid, b).any())
    if sampled:
        assert sat_overlap(a, b)
    elif sat_overlap(a, b):
        # overlap thinner than the sampling grid: must be a near-touch
        assert not sat_overlap(a, rect(x * 1.02, y * 1.02, h)) or abs(x) + abs(y) < 1e-9


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi))
def test_sat_is_symmetric(x, y, h):
    assert sat_overlap(rect(0), rect(x, y, h)) == sat_overlap(rect(x, y, h), rect(0))


def test_corners_are_centered():
    c = np.array(corners(1.0, 2.0, 0.3, 4.5, 2.0))
    assert c.mean(axis=0) == pytest.approx([1.0, 2.0])


# -- simulate ------------------------------------------------------------------

@pytest.fixture(scope="module")
def fb():
    return catalog_entry("FB")


def test_hard_brake_at_short_gap_collides(fb):
    cs = cs_for(fb, ego_init_speed=30, npc_init_gap=10, npc_init_speed=30,
                brake_trigger_time=1, brake_decel=9)
    trace = simulate(fb, cs)
    assert len(trace.collisions) >= 1


def test_safe_cutin(cutin1):
    cs = cs_for(cutin1, ego_init_speed=20, npc_init_long_offset=40, npc_init_speed=20,
                cutin_trigger_gap=40, cutin_duration=3, npc_target_speed=20)
    assert simulate(cutin1, cs).collisions == ()


@pytest.mark.parametrize("sid", ["FB", "CutIn1", "CutIn2", "OVTP", "NJLT", "NJRT"])
def test_simulation_is_deterministic(sid):
    ls = catalog_entry(sid)
    cs = ConcreteScenario(ls.id, tuple((ls.lower + ls.upper) / 2))
    assert export_trace(simulate(ls, cs)) == export_trace(simulate(ls, cs))


def test_stops_one_second_after_first_collision(fb):
    cs = cs_for(fb, ego_init_speed=30, npc_init_gap=10, npc_init_speed=30,
                brake_trigger_time=1, brake_decel=9)
    trace = simulate(fb, cs)
    assert trace.sim_time_s == pytest.approx(trace.collisions[0].time_s + 1.0)


def test_idm_equilibrium_behind_constant_leader():
    ls = parse_scenario_config(FOLLOW)
    v_lead, v0 = 15.0, 20.0
    trace = simulate(ls, cs_for(ls, ego_init_speed=v0, npc_init_gap=40, npc_init_speed=v_lead))
    ego, npc = trace.actor_arrays("ego"), trace.actor_arrays("npc1")
    gap = npc["x"][-1] - ego["x"][-1] - 4.5
    s_eq = (IDM.s0 + v_lead * IDM.time_headway) / math.sqrt(1 - (v_lead / v0) ** 4)
    assert abs(ego["speed"][-1] - v_lead) < 0.1
    assert abs(gap - s_eq) < 0.2


def _check_trace(ls, trace):
    times = np.array([s.time for s in trace.steps])
    assert np.allclose(np.diff(times), ls.dt_s)
    assert trace.sim_time_s == pytest.approx((len(trace.steps) - 1) * ls.dt_s)
    assert trace.sim_time_s <= ls.horizon_s + 1e-9
    assert trace.ego_distance_m >= 0
    for step in trace.steps:
        for s in step.states:
            assert s.speed >= 0
            assert -math.pi < s.heading <= math.pi
    ego = trace.actor_arrays("ego")
    moved = np.hypot(np.diff(ego["x"]), np.diff(ego["y"]))
    vmax = ego["speed"].max() + IDM.a_max * ls.dt_s
    assert np.all(moved <= vmax * ls.dt_s + 1e-6)
    assert len({ev.npc_id for ev in trace.collisions}) == len(trace.collisions)
    for ev in trace.collisions:
        k = int(round(ev.time_s / ls.dt_s))
        states = {s.actor_id: s for s in trace.steps[k].states}
        e, n = states["ego"], states[ev.npc_id]
        ext_e, ext_n = trace.extents["ego"], trace.extents[ev.npc_id]
        assert sat_overlap((e.x, e.y, e.heading, *ext_e), (n.x, n.y, n.heading, *ext_n))
        if k > 0:
            prev = {s.actor_id: s for s in trace.steps[k - 1].states}
            e, n = prev["ego"], prev[ev.npc_id]
            assert not sat_overlap((e.x, e.y, e.heading, *ext_e), (n.x, n.y, n.heading, *ext_n))


@pytest.mark.parametrize("sid", ["FB", "CutIn1", "CutIn2", "OVTP", "NJLT", "NJRT"])
@settings(max_examples=15, deadline=None)
@given(data=st.data())
def test_trace_invariants(sid, data):
    ls = catalog_entry(sid)
    u = data.draw(st.lists(st.floats(0, 1), min_size=ls.dim, max_size=ls.dim))
    cs = clamp_to_box(ls, ls.lower + np.array(u) * (ls.upper - ls.lower))
    _check_trace(ls, simulate(ls, cs))


def test_export_trace_layout(fb):
    cs = cs_for(fb, ego_init_speed=30, npc_init_gap=10, npc_init_speed=30,
                brake_trigger_time=1, brake_decel=9)
    text = export_trace(simulate(fb, cs))
    lines = text.splitlines()
    assert lines[0] == "time,actor_id,x,y,heading,speed,lane"
    assert any(line.startswith("time,npc_id,impact_x") for line in lines)


def test_ttc_cap_is_the_horizon_scale():
    assert T_MAX == 10.0
