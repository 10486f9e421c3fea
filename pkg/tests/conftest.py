import numpy as np
import pytest

from osg import runner
from osg.naturalness.flow import FlowModel, made_masks
from osg.scenario import catalog_entry

ACCEPTANCE_MODULE = "test_acceptance.py"


@pytest.fixture(scope="session")
def cutin1():
    return catalog_entry("CutIn1")


@pytest.fixture(scope="session")
def small_model_path(tmp_path_factory, cutin1):
    """A quickly trained CutIn1 naturalness model shared by the pipeline tests."""
    path = tmp_path_factory.mktemp("models") / "CutIn1.flow"
    runner.train(cutin1, path, synthetic=400, seed=3)
    return path


@pytest.fixture
def make_flow():
    return random_flow


def random_flow(dim, n_flows=3, hidden=(16, 16), seed=0, scale=0.5, mean=None, std=None):
    """Untrained flow with random masked weights, for structural checks."""
    rng = np.random.default_rng(seed)
    masks = made_masks(dim, hidden)
    widths = [dim, *hidden, 2 * dim]
    layers = [
        [(rng.normal(0, scale, (widths[i + 1], widths[i])) * masks[i],
          rng.normal(0, scale, widths[i + 1])) for i in range(len(masks))]
        for _ in range(n_flows)
    ]
    return FlowModel(
        ls_id="test", dim=dim, hidden=hidden, alpha_clamp=7.0, layers=layers,
        feature_mean=np.zeros(dim) if mean is None else np.asarray(mean, float),
        feature_std=np.ones(dim) if std is None else np.asarray(std, float),
        train_loglik_sorted=np.sort(rng.normal(-3, 1, 101)),
    )


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if ACCEPTANCE_MODULE in rep.nodeid and rep.when == "call":
                rows.append((rep.nodeid.split("::")[-1], outcome.upper()))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, outcome in sorted(rows):
            terminalreporter.write_line(f"{outcome:<7} {name}")
