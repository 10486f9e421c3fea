"""ADS safety scoring over a grid of scenario types and risk levels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from osg.risk import RiskReport
from osg.sim import SimulationTrace

N_S = 20
OMEGA_SET = (0.0, 0.3, 0.5, 0.7, 1.0)
K_MU = 0.5
K_SIGMA = 0.1


class IncompleteGridError(KeyError):
    def __init__(self, missing: Sequence[tuple[str, float]]):
        self.missing = list(missing)
        names = ", ".join(f"({s}, {w:g})" for s, w in self.missing)
        super().__init__(f"missing score cells: {names}")

    def __str__(self):
        return self.args[0]


def q_cell(reports: Sequence[RiskReport | float], n_s: int = N_S) -> float:
    """Score of one (type, omega) cell: 100 minus the mean normalized risk, in percent."""
    if len(reports) != n_s:
        raise ValueError(f"expected {n_s} reports, got {len(reports)}")
    adv = [getattr(r, "adv_norm", r) for r in reports]
    return 100.0 / n_s * sum(1.0 - a for a in adv)


def k_weight(omega: float) -> float:
    return math.exp(-((omega - K_MU) ** 2) / (2 * K_SIGMA ** 2))


def total_score(cells: Mapping[tuple[str, float], float],
                omega_set: Sequence[float] = OMEGA_SET,
                scenario_ids: Iterable[str] | None = None) -> float:
    """K-weighted mean of all cells; every (type, omega) pair must be present."""
    ids = sorted({s for s, _ in cells}) if scenario_ids is None else list(scenario_ids)
    missing = [(s, w) for s in ids for w in omega_set if (s, w) not in cells]
    if missing or not ids:
        raise IncompleteGridError(missing)
    num = sum(k_weight(w) * sum(cells[(s, w)] for s in ids) for w in omega_set)
    return num / (len(ids) * sum(k_weight(w) for w in omega_set))


@dataclass
class ScoreBook:
    per_cell: dict[tuple[str, float], float]
    omega_set: tuple[float, ...] = OMEGA_SET
    n_s: int = N_S
    weights: dict[float, float] = field(init=False)
    total: float = field(init=False)

    def __post_init__(self):
        self.weights = {w: k_weight(w) for w in self.omega_set}
        self.total = total_score(self.per_cell, self.omega_set)

    @property
    def scenario_ids(self) -> list[str]:
        return sorted({s for s, _ in self.per_cell})


@dataclass(frozen=True)
class IndicatorReport:
    cr: float
    act_s: float
    acd_m: float
    n_scenarios: int
    n_collisions: int
    total_time_s: float
    total_distance_m: float


def indicators_from_totals(n_scenarios: int, n_collided: int,
                           total_time_s: float, total_distance_m: float) -> IndicatorReport:
    if n_scenarios <= 0:
        raise ValueError("indicators need at least one scenario")
    act = total_time_s / n_collided if n_collided else math.inf
    acd = total_distance_m / n_collided if n_collided else math.inf
    return IndicatorReport(n_collided / n_scenarios, act, acd, n_scenarios, n_collided,
                           total_time_s, total_distance_m)


def indicators(traces: Sequence[SimulationTrace]) -> IndicatorReport:
    """Collision rate, time per collision and distance per collision.

    A scenario counts once however many NPCs it hit.
    """
    if not traces:
        raise ValueError("indicators need at least one trace")
    return indicators_from_totals(
        len(traces),
        sum(1 for t in traces if t.collisions),
        sum(t.sim_time_s for t in traces),
        sum(t.ego_distance_m for t in traces),
    )
