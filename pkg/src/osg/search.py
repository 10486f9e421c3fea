"""Risk-regulated objective and the speciation-based particle swarm.

The swarm keeps several local optima alive by grouping particles into
species around fitness-sorted seeds; each particle is pulled toward its
own best and its species' best instead of a single global best.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from osg.scenario import ConcreteScenario, DimensionError, LogicalScenario

INERTIA = 0.7298
COGNITIVE = 1.49618
SOCIAL = 1.49618
VELOCITY_FRACTION = 0.5
DEFAULT_C_SPEC = 25.0
MEMO_DECIMALS = 9


class SearchError(RuntimeError):
    """An evaluator call failed; ``values`` holds the offending scenario."""

    def __init__(self, values, cause: BaseException):
        super().__init__(f"evaluation failed at {list(values)}: {cause!r}")
        self.values = tuple(values)
        self.cause = cause


def objective(adv_norm: float, nat_norm: float, omega: float) -> float:
    """Blend criticalness and naturalness; omega=1 is pure risk, omega=0 pure realism.

    ``0 ** 0`` evaluates to 1, so the endpoints drop the other term exactly.
    """
    base = adv_norm ** (omega * omega) + nat_norm ** ((1.0 - omega) ** 2)
    return base ** math.exp(omega * (1.0 - omega))


def speciation_threshold(bounds, c_spec: float = DEFAULT_C_SPEC) -> np.ndarray:
    """Per-dimension species radius: range / c_spec^(1/D)."""
    lower, upper = _bounds(bounds)
    if not c_spec > 0:
        raise ValueError(f"speciation constant must be positive, got {c_spec}")
    return (upper - lower) / c_spec ** (1.0 / len(lower))


def same_species(p1, p2, tau) -> bool:
    p1, p2, tau = (np.asarray(v, dtype=float) for v in (p1, p2, tau))
    if not p1.shape == p2.shape == tau.shape:
        raise DimensionError(f"shape mismatch {p1.shape}, {p2.shape}, {tau.shape}")
    return bool(np.all(np.abs(p1 - p2) <= tau))


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    pbest_position: np.ndarray
    pbest_value: float = -math.inf
    species_id: int = -1
    pbest_hint: float = -math.inf  # secondary key when pbest values tie


@dataclass
class Species:
    seed_index: int
    members: list[int]
    sbest_position: np.ndarray
    sbest_value: float


def speciate(particles: Sequence[Particle], tau) -> list[Species]:
    """Greedy seeding on personal bests, best first; ties by hint, then index."""
    order = sorted(range(len(particles)),
                   key=lambda i: (-particles[i].pbest_value, -particles[i].pbest_hint, i))
    assigned: set[int] = set()
    species: list[Species] = []
    for seed in order:
        if seed in assigned:
            continue
        anchor = particles[seed].pbest_position
        members = [i for i in order
                   if i not in assigned and same_species(anchor, particles[i].pbest_position, tau)]
        assigned.update(members)
        members.sort()
        species.append(Species(seed, members, anchor.copy(), particles[seed].pbest_value))
    for sid, sp in enumerate(species):
        for i in sp.members:
            particles[i].species_id = sid
    return species


@dataclass(frozen=True)
class SearchConfig:
    omega: float
    population: int = 20
    iterations: int = 15
    c_spec: float = DEFAULT_C_SPEC
    inertia: float = INERTIA
    cognitive: float = COGNITIVE
    social: float = SOCIAL
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")
        if self.population < 2:
            raise ValueError(f"population must be >= 2, got {self.population}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.c_spec >= 1.0:
            raise ValueError(f"speciation constant must be >= 1, got {self.c_spec}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class Evaluation:
    """Evaluator output. ``hint`` only orders candidates whose objective ties."""

    adv_norm: float
    nat_norm: float
    info: object = None
    hint: float = 0.0


@dataclass(frozen=True)
class ScenarioRecord:
    particle: int
    species_id: int
    values: tuple[float, ...]
    g: float
    evaluation: Evaluation


@dataclass
class SearchResult:
    species: list[Species]
    particles: list[Particle]
    records: list[ScenarioRecord]
    evaluations: int
    history: list[float] = field(default_factory=list)

    def sbest_records(self) -> list[ScenarioRecord]:
        return [self.records[sp.seed_index] for sp in self.species]


def _bounds(bounds):
    if isinstance(bounds, LogicalScenario):
        return bounds.lower, bounds.upper
    lower, upper = (np.asarray(b, dtype=float).ravel() for b in bounds)
    if lower.shape != upper.shape or np.any(lower > upper):
        raise ValueError("bounds must be matching lower <= upper vectors")
    return lower, upper


def thread_count(cfg: SearchConfig) -> int:
    if cfg.threads is not None:
        return max(1, int(cfg.threads))
    raw = os.environ.get("OSG_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _rng(seed: int, particle: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, particle, iteration]))


def _as_evaluation(out) -> Evaluation:
    if isinstance(out, Evaluation):
        return out
    adv_n, nat_n, *rest = out
    return Evaluation(float(adv_n), float(nat_n), rest[0] if rest else None)


def run_search(bounds, cfg: SearchConfig,
               evaluator: Callable[[ConcreteScenario], object]) -> SearchResult:
    """Speciation PSO maximizing ``objective`` over the box.

    ``bounds`` is a LogicalScenario or a (lower, upper) pair. ``evaluator``
    receives a ConcreteScenario and returns an ``Evaluation`` or a tuple
    ``(adv_norm, nat_norm[, info])``. Calls within an iteration may run on
    ``OSG_THREADS`` worker threads; results are merged in particle order.
    """
    lower, upper = _bounds(bounds)
    ls_id = bounds.id if isinstance(bounds, LogicalScenario) else ""
    span = upper - lower
    vmax = VELOCITY_FRACTION * span
    tau = speciation_threshold((lower, upper), cfg.c_spec)
    n_workers = thread_count(cfg)

    particles = []
    for i in range(cfg.population):
        rng = _rng(cfg.seed, i, 0)
        pos = lower + rng.random(len(lower)) * span
        vel = (rng.random(len(lower)) * 2 - 1) * 0.1 * span
        particles.append(Particle(pos, vel, pos.copy()))

    # rounded position -> (position actually evaluated, result)
    memo: dict[tuple, tuple[tuple[float, ...], Evaluation]] = {}
    best: list[tuple[tuple[float, ...], Evaluation] | None] = [None] * cfg.population

    def evaluate(values):
        cs = ConcreteScenario(ls_id, values, cfg.seed)
        try:
            return values, _as_evaluation(evaluator(cs))
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise SearchError(cs.values, exc) from exc

    def evaluate_all():
        keys = [tuple(np.round(p.position, MEMO_DECIMALS).tolist()) for p in particles]
        todo = {}
        for k, p in zip(keys, particles):
            if k not in memo and k not in todo:
                todo[k] = tuple(float(v) for v in p.position)
        if n_workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(evaluate, todo.values()))
        else:
            results = [evaluate(v) for v in todo.values()]
        memo.update(zip(todo, results))
        return [memo[k] for k in keys]

    history = []
    species: list[Species] = []
    for t in range(1, cfg.iterations + 1):
        for i, (p, (values, ev)) in enumerate(zip(particles, evaluate_all())):
            g = objective(ev.adv_norm, ev.nat_norm, cfg.omega)
            if (g, ev.hint) > (p.pbest_value, p.pbest_hint):
                p.pbest_value, p.pbest_hint = g, ev.hint
                p.pbest_position = np.array(values)
                best[i] = (values, ev)
        species = speciate(particles, tau)
        history.append(max(p.pbest_value for p in particles))
        if t == cfg.iterations:
            break
        for i, p in enumerate(particles):
            rng = _rng(cfg.seed, i, t)
            r1, r2 = rng.random(len(lower)), rng.random(len(lower))
            sbest = species[p.species_id].sbest_position
            v = (cfg.inertia * p.velocity
                 + cfg.cognitive * r1 * (p.pbest_position - p.position)
                 + cfg.social * r2 * (sbest - p.position))
            p.velocity = np.clip(v, -vmax, vmax)
            p.position = np.clip(p.position + p.velocity, lower, upper)

    records = [ScenarioRecord(i, p.species_id, best[i][0], p.pbest_value, best[i][1])
               for i, p in enumerate(particles)]
    return SearchResult(species, particles, records, len(memo), history)
