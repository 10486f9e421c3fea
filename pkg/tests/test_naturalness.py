import math

import numpy as np
import pytest

from osg.naturalness import flow
from osg.naturalness.data import (NGSIM_SCHEMA, SchemaError, TrajectoryPoint, extract_events,
                                  ingest_csv, synthesize, write_csv)
from osg.scenario import ConcreteScenario, DimensionError, catalog_entry

HEADER = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID,Preceding,Following\n"


# -- ingest --------------------------------------------------------------------

def test_ingest_three_rows(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(HEADER + "1,0,5.2,100,20,2,0,3\n1,1,5.2,102,20,2,0,3\n3,0,5.2,80,19,2,1,0\n")
    points, skipped = ingest_csv(path)
    assert len(points) == 3 and skipped == 0
    assert points[0].front_id is None and points[0].rear_id == 3
    assert points[1].time == pytest.approx(0.1)


def test_ingest_skips_corrupt_rows(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(HEADER + "1,0,5.2,100,20,2,0,0\n1,1,5.2,102,fast,2,0,0\n1,2,5.2,104,20,2,0,0\n")
    points, skipped = ingest_csv(path)
    assert len(points) == 2 and skipped == 1


def test_ingest_feet_conversion(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(HEADER + "1,0,10,100,50,2,0,0\n")
    (p,), _ = ingest_csv(path, feet=True)
    assert p.coords == pytest.approx((3.048, 30.48))
    assert p.speed == pytest.approx(15.24)


def test_default_schema_is_ngsim():
    assert sorted(NGSIM_SCHEMA.values()) == sorted(
        ["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Vel", "Lane_ID", "Preceding", "Following"])


def test_ingest_missing_column(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("Vehicle_ID,Frame_ID\n1,0\n")
    with pytest.raises(SchemaError):
        ingest_csv(path)


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("")
    with pytest.raises(ValueError):
        ingest_csv(path)


# -- extraction ----------------------------------------------------------------

def _cutin_points(change=True):
    """Vehicle 1 moves from lane 3 into lane 2 ahead of vehicle 2 around t = 6 s."""
    pts = []
    for frame in range(121):
        t = frame / 10
        u = min(max((t - 5.0) / 2.0, 0.0), 1.0) if change else 0.0
        x1 = 3.5 * 2.5 - 3.5 * (3 * u * u - 2 * u ** 3)
        lane1 = 2 if change and t >= 6.0 else 3
        pts.append(TrajectoryPoint((x1, 225 + 20 * t), 20.0, lane1, None, 2, t, 1))
        pts.append(TrajectoryPoint((3.5 * 1.5, 200 + 20 * t), 20.0, 2, 1, None, t, 2))
    return pts


def test_lane_change_gives_one_cutin_sample(cutin1, tmp_path):
    path = tmp_path / "cut.csv"
    write_csv(_cutin_points(), path)
    points, _ = ingest_csv(path)
    (sample,) = extract_events(points, cutin1)
    assert sample.source_window == pytest.approx((1.0, 11.0))
    feats = dict(zip(cutin1.names, sample.features))
    assert feats["ego_init_speed"] == pytest.approx(20)
    assert feats["npc_init_long_offset"] == pytest.approx(25)
    assert feats["npc_target_speed"] == pytest.approx(20)
    assert 1.0 <= feats["cutin_duration"] <= 2.5


def test_no_lane_change_no_samples(cutin1):
    assert extract_events(_cutin_points(change=False), cutin1) == []


def test_synthetic_in_box_rate_large(cutin1):
    events = extract_events(synthesize(cutin1, 5000, seed=0), cutin1)
    assert len(events) >= 4500


@pytest.mark.parametrize("sid", ["FB", "CutIn2", "OVTP", "NJLT", "NJRT"])
def test_synthetic_in_box_rate(sid):
    ls = catalog_entry(sid)
    events = extract_events(synthesize(ls, 300, seed=1), ls)
    assert len(events) >= 270
    assert all(len(e.features) == ls.dim for e in events)


def test_synthetic_is_deterministic(cutin1):
    assert synthesize(cutin1, 20, seed=4) == synthesize(cutin1, 20, seed=4)


# -- flow structure --------------------------------------------------------------

def test_identity_flow_log_density():
    zero = [[(np.zeros((4, 2)), np.zeros(4)), (np.zeros((4, 4)), np.zeros(4))]]
    model = flow.FlowModel("id", 2, (4,), 7.0, zero, np.zeros(2), np.ones(2), np.zeros(1))
    assert flow.log_likelihood(model, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi))
    x = np.array([0.3, -1.2])
    expected = -0.5 * (x @ x) - math.log(2 * math.pi)
    assert flow.log_likelihood(model, x) == pytest.approx(expected)


def test_masks_are_autoregressive():
    masks = flow.made_masks(4, (8, 8))
    reach = masks[0]
    for m in masks[1:]:
        reach = (m @ reach > 0).astype(float)
    # output d (and its alpha twin) depends only on inputs < d
    for d in range(4):
        for block in (reach[d], reach[4 + d]):
            assert not block[d:].any()


def _num_jacobian(f, x, eps=1e-6):
    cols = []
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = eps
        cols.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def test_single_flow_log_det_matches_jacobian(make_flow):
    model = make_flow(2, n_flows=1, seed=1)
    for u in np.random.default_rng(0).normal(size=(20, 2)):
        jac = _num_jacobian(lambda v: flow.single_flow_forward(model, 0, v)[0], u)
        assert abs(np.log(abs(np.linalg.det(jac))) - flow.flow_log_det(model, 0, u)[0]) < 1e-4


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_change_of_variables(make_flow, dim):
    model = make_flow(dim, seed=dim, mean=np.arange(dim), std=np.full(dim, 2.0))
    for x in np.random.default_rng(1).normal(size=(10, dim)):
        jac = _num_jacobian(
            lambda v: flow.inverse(model, flow.standardize(model, v))[0][0], x)
        z = flow.inverse(model, flow.standardize(model, x))[0][0]
        expected = (-0.5 * z @ z - 0.5 * dim * math.log(2 * math.pi)
                    + np.log(abs(np.linalg.det(jac))))
        assert flow.log_likelihood(model, x) == pytest.approx(expected, abs=1e-5)


def test_invertibility(make_flow):
    model = make_flow(4, n_flows=5, seed=2)
    x = np.random.default_rng(3).normal(size=(1000, 4))
    z, _ = flow.inverse(model, x)
    assert np.abs(flow.forward(model, z) - x).max() < 1e-6


def test_log_likelihood_is_finite_far_away(make_flow):
    model = make_flow(3, scale=3.0)
    assert np.isfinite(flow.log_likelihood_batch(model, np.full((5, 3), 1e3))).all()


def test_dimension_mismatch(make_flow):
    model = make_flow(3)
    with pytest.raises(DimensionError):
        flow.log_likelihood(model, ConcreteScenario("x", (1.0, 2.0)))


def test_nonpositive_std_rejected(make_flow):
    with pytest.raises(flow.FlowError):
        make_flow(2, std=[1.0, 0.0])


# -- nat_norm ------------------------------------------------------------------

def test_nat_norm_edges(make_flow):
    model = make_flow(2)
    ref = model.train_loglik_sorted
    assert flow.nat_norm(model, ref[0] - 1) == 0.0
    assert flow.nat_norm(model, ref[-1] + 1) == 1.0
    assert abs(flow.nat_norm(model, float(np.median(ref))) - 0.5) <= 1 / len(ref)


def test_nat_norm_monotone(make_flow):
    model = make_flow(2)
    grid = np.linspace(-10, 5, 400)
    ranks = [flow.nat_norm(model, g) for g in grid]
    assert all(b >= a for a, b in zip(ranks, ranks[1:]))


# -- training --------------------------------------------------------------------

@pytest.fixture(scope="module")
def gauss():
    rng = np.random.default_rng(11)
    return rng.normal([3.0, -1.0], [2.0, 0.5], size=(1000, 2))


@pytest.fixture(scope="module")
def trained(gauss):
    return flow.train_flow(gauss, flow.FlowHyper(epochs=25), seed=5, ls_id="g")


def test_training_fits_a_gaussian(trained):
    entropy = 0.5 * 2 * math.log(2 * math.pi * math.e) + math.log(2.0 * 0.5)
    held = np.random.default_rng(12).normal([3.0, -1.0], [2.0, 0.5], size=(2000, 2))
    assert flow.log_likelihood_batch(trained, held).mean() == pytest.approx(-entropy, abs=0.15)


def test_training_history_is_nondecreasing(trained):
    assert all(b - a >= -0.05 for a, b in zip(trained.history, trained.history[1:]))


def test_training_is_deterministic(gauss, trained):
    again = flow.train_flow(gauss, flow.FlowHyper(epochs=25), seed=5, ls_id="g")
    for la, lb in zip(trained.layers, again.layers):
        for (wa, ba), (wb, bb) in zip(la, lb):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)


def test_train_loglik_reference_is_sorted(trained):
    ref = trained.train_loglik_sorted
    assert np.all(np.diff(ref) >= 0) and len(ref) == trained.meta["n_train"]


def test_too_few_samples():
    with pytest.raises(flow.TooFewSamplesError):
        flow.train_flow(np.zeros((199, 2)))


def test_save_load_round_trip(trained, tmp_path):
    path = tmp_path / "g.flow"
    flow.save(trained, path)
    back = flow.load(path)
    x = np.random.default_rng(0).normal(size=(50, 2))
    assert np.array_equal(flow.log_likelihood_batch(back, x), flow.log_likelihood_batch(trained, x))
    assert np.array_equal(back.train_loglik_sorted, trained.train_loglik_sorted)
    doc = flow.to_document(trained)
    assert doc["format"] == flow.FORMAT_NAME and doc["version"] == flow.FORMAT_VERSION


def test_load_rejects_unknown_version(trained, tmp_path):
    doc = flow.to_document(trained)
    doc["version"] = 99
    with pytest.raises(flow.FlowError):
        flow.from_document(doc)
