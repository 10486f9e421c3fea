"""Pipeline plumbing behind the command line: training, generation, scoring, replay.

Output layout of ``generate``::

    <out>/<ls>/<omega>/scenario_<k>.record      one JSON record per final particle
    <out>/<ls>/<omega>/scenario_<k>.trace.csv   its simulation trace
    <out>/<ls>/<omega>/summary.csv              CR / ACT / ACD of the cell

Everything written is a pure function of the inputs: no timestamps, fixed
key order, and floats in shortest round-trip form.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from osg import __version__
from osg.naturalness import data as natdata
from osg.naturalness import flow
from osg.risk import adv, ttc_series
from osg.scenario import (CATALOG_IDS, ConcreteScenario, LogicalScenario, load_scenario,
                          parse_scenario_config, serialize_scenario_config)
from osg.scoring import (N_S, OMEGA_SET, IncompleteGridError, indicators_from_totals,
                         k_weight, q_cell, total_score)
from osg.search import Evaluation, SearchConfig, SearchResult, objective, run_search
from osg.sim import export_trace, simulate

log = logging.getLogger(__name__)

RECORD_SUFFIX = ".record"
G_TOLERANCE = 1e-9


class RecordError(ValueError):
    pass


def omega_dirname(omega: float) -> str:
    return f"{omega:.2f}"


def default_model_path(ls_id: str) -> Path:
    return Path("models") / f"{ls_id}.flow"


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


# ---------------------------------------------------------------------------
# train

@dataclass(frozen=True)
class TrainReport:
    ls_id: str
    source: str
    n_points: int
    skipped_rows: int
    n_events: int
    seed: int
    epochs_run: int
    final_train_loglik: float
    model_path: str


def collect_events(ls: LogicalScenario, csv_path=None, synthetic: int | None = None,
                   seed: int = 0, feet: bool = False):
    """Trajectory points -> event samples; returns (samples, n_points, skipped, source)."""
    if csv_path is not None:
        points, skipped = natdata.ingest_csv(csv_path, feet=feet)
        source = f"csv:{Path(csv_path).name}"
    else:
        points, skipped = natdata.synthesize(ls, synthetic, seed=seed), 0
        source = f"synthetic:{synthetic}"
    return natdata.extract_events(points, ls), len(points), skipped, source


def train(ls: LogicalScenario, model_path, csv_path=None, synthetic: int | None = None,
          seed: int = 0, feet: bool = False, hyper: flow.FlowHyper | None = None) -> TrainReport:
    samples, n_points, skipped, source = collect_events(ls, csv_path, synthetic, seed, feet)
    log.info("%s: %d events from %d points", ls.id, len(samples), n_points)
    model = flow.train_flow(samples, hyper, seed=seed, ls_id=ls.id)
    model_path = Path(model_path)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    flow.save(model, model_path)
    report = TrainReport(ls.id, source, n_points, skipped, len(samples), seed,
                         int(model.meta["epochs_run"]), float(model.meta["final_train_loglik"]),
                         model_path.name)
    with open(model_path.with_suffix(".report.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


# ---------------------------------------------------------------------------
# generate

@dataclass(frozen=True)
class RunConfig:
    ls_source: str
    omegas: tuple[float, ...]
    population: int = 20
    iterations: int = 15
    c_spec: float = 25.0
    seed: int = 0
    model_path: str | None = None
    out_dir: str = "out"

    def __post_init__(self):
        bad = [w for w in self.omegas if not 0.0 <= w <= 1.0]
        if bad or not self.omegas:
            raise ValueError(f"omega values must lie in [0, 1]: {bad or 'none given'}")

    def search_config(self, omega: float, threads: int | None = None) -> SearchConfig:
        return SearchConfig(omega=omega, population=self.population, iterations=self.iterations,
                            c_spec=self.c_spec, seed=self.seed, threads=threads)


def config_hash(cfg: RunConfig, ls: LogicalScenario, model_digest: str) -> str:
    doc = {
        "scenario": serialize_scenario_config(ls),
        "omegas": [repr(w) for w in cfg.omegas],
        "population": cfg.population,
        "iterations": cfg.iterations,
        "c_spec": repr(cfg.c_spec),
        "seed": cfg.seed,
        "model_sha256": model_digest,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def make_evaluator(ls: LogicalScenario, model: flow.FlowModel):
    """Concrete scenario -> Evaluation(adv_norm, nat_norm, info). Pure and thread-safe."""
    def evaluate(cs: ConcreteScenario) -> Evaluation:
        trace = simulate(ls, cs)
        risk = adv(trace)
        loglik = flow.log_likelihood(model, cs)
        info = {
            "risk": risk,
            "nat_loglik": loglik,
            "sim_time_s": trace.sim_time_s,
            "ego_distance_m": trace.ego_distance_m,
        }
        # The rank saturates at 0 off the data manifold; the raw
        # log-likelihood keeps the swarm climbing there.
        return Evaluation(risk.adv_norm, flow.nat_norm(model, loglik), info, hint=loglik)
    return evaluate


def _record(ls, omega, rec, species_seeds, meta, trace_name) -> dict:
    ev = rec.evaluation
    info = ev.info
    risk = info["risk"]
    return {
        "ls_id": ls.id,
        "omega": omega,
        "particle": rec.particle,
        "species_id": rec.species_id,
        "species_best": rec.particle in species_seeds,
        "values": dict(zip(ls.names, rec.values)),
        "G": rec.g,
        "adv_raw": risk.adv_raw,
        "adv_norm": ev.adv_norm,
        "min_ttc_s": risk.min_ttc_s,
        "collision_count": risk.collision_count,
        "collision_types": risk.labels,
        "nat_loglik": info["nat_loglik"],
        "nat_norm": ev.nat_norm,
        "sim_time_s": info["sim_time_s"],
        "ego_distance_m": info["ego_distance_m"],
        "trace": trace_name,
        "scenario_config": serialize_scenario_config(ls),
        **meta,
    }


def _dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


SUMMARY_COLUMNS = ("ls_id", "omega", "n_scenarios", "n_species", "n_collided",
                   "CR", "ACT", "ACD", "total_time_s", "total_distance_m")


def write_cell(cell_dir: Path, ls: LogicalScenario, omega: float, result: SearchResult,
               meta: dict) -> list[Path]:
    cell_dir.mkdir(parents=True, exist_ok=True)
    seeds = {sp.seed_index for sp in result.species}
    paths = []
    for rec in result.records:
        name = f"scenario_{rec.particle}"
        trace = simulate(ls, ConcreteScenario(ls.id, rec.values, meta["seed"]))
        (cell_dir / f"{name}.trace.csv").write_text(export_trace(trace), encoding="utf-8")
        path = cell_dir / f"{name}{RECORD_SUFFIX}"
        path.write_text(_dump_json(_record(ls, omega, rec, seeds, meta, f"{name}.trace.csv")),
                        encoding="utf-8")
        paths.append(path)
    rows = [r.evaluation.info for r in result.records]
    ind = indicators_from_totals(
        len(rows), sum(1 for r in rows if r["risk"].collision_count > 0),
        sum(r["sim_time_s"] for r in rows), sum(r["ego_distance_m"] for r in rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    w.writerow([ls.id, _fmt(omega), ind.n_scenarios, len(result.species), ind.n_collisions,
                _fmt(ind.cr), _fmt(ind.act_s), _fmt(ind.acd_m), _fmt(ind.total_time_s),
                _fmt(ind.total_distance_m)])
    (cell_dir / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    return paths


def generate(cfg: RunConfig, threads: int | None = None) -> dict[float, SearchResult]:
    """Run the search for each omega and write the cell directories.

    Raises FileNotFoundError for a missing model and SearchError when a
    simulation aborts.
    """
    ls = load_scenario(cfg.ls_source)
    model_path = Path(cfg.model_path) if cfg.model_path else default_model_path(ls.id)
    if not model_path.is_file():
        raise FileNotFoundError(f"no naturalness model at {model_path}; run 'osg train' first")
    model = flow.load(model_path)
    if model.dim != ls.dim:
        raise flow.FlowError(f"model {model_path} has dimension {model.dim}, {ls.id} needs {ls.dim}")
    meta = {"config_hash": config_hash(cfg, ls, _sha256_file(model_path)),
            "seed": cfg.seed, "tool_version": __version__}
    evaluator = make_evaluator(ls, model)
    results = {}
    for omega in cfg.omegas:
        result = run_search(ls, cfg.search_config(omega, threads), evaluator)
        write_cell(Path(cfg.out_dir) / ls.id / omega_dirname(omega), ls, omega, result, meta)
        log.info("%s omega=%g: %d species, %d evaluations", ls.id, omega,
                 len(result.species), result.evaluations)
        results[omega] = result
    return results


# ---------------------------------------------------------------------------
# records

def load_record(path) -> dict:
    """Read a scenario record and check that its stored G matches its own fields."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no scenario record at {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RecordError(f"{path}: malformed record: {exc}") from exc
    g = objective(rec["adv_norm"], rec["nat_norm"], rec["omega"])
    if abs(g - rec["G"]) > G_TOLERANCE:
        raise RecordError(f"{path}: stored G {rec['G']} != recomputed {g}")
    return rec


def load_cell(cell_dir: Path) -> list[dict]:
    paths = sorted(cell_dir.glob(f"scenario_*{RECORD_SUFFIX}"),
                   key=lambda p: int(p.stem.split("_")[1]))
    return [load_record(p) for p in paths]


# ---------------------------------------------------------------------------
# score

SCORE_COLUMNS = ("scenario_id", "omega", "Q", "K", "CR", "ACT", "ACD", "total")


@dataclass(frozen=True)
class CellScore:
    scenario_id: str
    omega: float
    q: float
    k: float
    cr: float
    act_s: float
    acd_m: float


def select_top(records: list[dict], n_s: int) -> list[dict]:
    """The n_s records with the highest G (ties by particle), cycled if fewer exist."""
    ranked = sorted(records, key=lambda r: (-r["G"], r["particle"]))
    return [ranked[i % len(ranked)] for i in range(n_s)]


def score_cell(records: list[dict], n_s: int = N_S) -> CellScore:
    chosen = select_top(records, n_s)
    first = chosen[0]
    ind = indicators_from_totals(
        n_s, sum(1 for r in chosen if r["collision_count"] > 0),
        sum(r["sim_time_s"] for r in chosen), sum(r["ego_distance_m"] for r in chosen))
    return CellScore(first["ls_id"], first["omega"], q_cell([r["adv_norm"] for r in chosen], n_s),
                     k_weight(first["omega"]), ind.cr, ind.act_s, ind.acd_m)


def score(out_dir, scenario_ids: Sequence[str] = CATALOG_IDS,
          omega_set: Sequence[float] = OMEGA_SET, n_s: int = N_S):
    """Score every (type, omega) cell under ``out_dir``; returns (cells, total)."""
    out_dir = Path(out_dir)
    cells, missing = {}, []
    for sid in scenario_ids:
        for w in omega_set:
            cell_dir = out_dir / sid / omega_dirname(w)
            records = load_cell(cell_dir) if cell_dir.is_dir() else []
            if not records:
                missing.append((sid, w))
                continue
            cells[(sid, w)] = score_cell(records, n_s)
    if missing:
        raise IncompleteGridError(missing)
    total = total_score({key: c.q for key, c in cells.items()}, omega_set, scenario_ids)
    return cells, total


def score_csv(cells: dict, total: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for (sid, omega), c in cells.items():
        w.writerow([sid, _fmt(omega), _fmt(c.q), _fmt(c.k), _fmt(c.cr), _fmt(c.act_s),
                    _fmt(c.acd_m), _fmt(total)])
    return buf.getvalue()


def score_table(cells: dict, total: float, agent: str = "idm-ego") -> str:
    """Per-type K-weighted scores in one row, with the grid total as the average."""
    ids = list(dict.fromkeys(sid for sid, _ in cells))
    per_type = []
    for sid in ids:
        ws = [w for s, w in cells if s == sid]
        per_type.append(sum(k_weight(w) * cells[(sid, w)].q for w in ws)
                        / sum(k_weight(w) for w in ws))
    head = ["Agent", *ids, "Average"]
    row = [agent, *(f"{q:.2f}" for q in per_type), f"{total:.2f}"]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    fmt = "  ".join(f"{{:<{n}}}" for n in widths)
    return fmt.format(*head) + "\n" + fmt.format(*row)


# ---------------------------------------------------------------------------
# replay

def replay(record_path, out_dir) -> tuple[Path, Path]:
    """Re-simulate a stored record; writes its trace and a per-step TTC series."""
    record_path = Path(record_path)
    rec = load_record(record_path)
    ls = parse_scenario_config(rec["scenario_config"])
    cs = ConcreteScenario(ls.id, tuple(float(rec["values"][n]) for n in ls.names), rec["seed"])
    trace = simulate(ls, cs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = record_path.stem
    trace_path = out_dir / f"{stem}.trace.csv"
    trace_path.write_text(export_trace(trace), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("time", "ttc_s"))
    for st, ttc in zip(trace.steps, ttc_series(trace)):
        w.writerow((f"{st.time:.2f}", _fmt(ttc)))
    ttc_path = out_dir / f"{stem}.ttc.csv"
    ttc_path.write_text(buf.getvalue(), encoding="utf-8")
    return trace_path, ttc_path

