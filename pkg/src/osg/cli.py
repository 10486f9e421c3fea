"""``osg`` command line.

Exit codes: 0 ok, 2 bad arguments or too little training data, 3 missing
model, 4 simulation abort, 5 incomplete or inconsistent score grid,
6 missing replay record.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import tomli

from osg import __version__, runner
from osg.naturalness import flow
from osg.naturalness.data import SchemaError
from osg.scenario import (CATALOG_IDS, ScenarioError, builtin_catalog, catalog_entry,
                          serialize_scenario_config)
from osg.scoring import IncompleteGridError, N_S, OMEGA_SET
from osg.search import SearchError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_MODEL = 3
EXIT_SIM_ABORT = 4
EXIT_GRID = 5
EXIT_NO_RECORD = 6

log = logging.getLogger("osg")


def _omega(text: str) -> float:
    try:
        w = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= w <= 1.0:
        raise argparse.ArgumentTypeError(f"omega {w} outside [0, 1]")
    return w


def _omega_list(text: str) -> tuple[float, ...]:
    return tuple(_omega(part) for part in text.split(",") if part.strip())


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _fail(code: int, message: str) -> int:
    print(f"osg: error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        ls = runner.load_scenario(args.ls)
    except (KeyError, OSError, ScenarioError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    out = Path(args.out) if args.out else runner.default_model_path(ls.id)
    try:
        report = runner.train(ls, out, csv_path=args.csv, synthetic=args.synthetic,
                              seed=args.seed, feet=args.feet,
                              hyper=flow.FlowHyper(epochs=args.epochs))
    except flow.TooFewSamplesError as exc:
        return _fail(EXIT_USAGE, f"{ls.id}: too few events to train ({exc})")
    except (OSError, SchemaError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"{ls.id}: cannot read trajectories: {exc}")
    print(f"{ls.id}: trained on {report.n_events} events, "
          f"final mean log-likelihood {report.final_train_loglik:.4f} -> {out}")
    return EXIT_OK


def _run_config(args) -> runner.RunConfig:
    base = {}
    if args.config:
        with open(args.config, "rb") as fh:
            base = tomli.load(fh).get("generate", {})
    pick = lambda flag, key, default: flag if flag is not None else base.get(key, default)
    omegas = args.omega if args.omega is not None else tuple(base.get("omega", ()))
    return runner.RunConfig(
        ls_source=pick(args.ls, "ls", None),
        omegas=tuple(float(w) for w in omegas),
        population=int(pick(args.population, "population", 20)),
        iterations=int(pick(args.iterations, "iterations", 15)),
        c_spec=float(pick(args.c_spec, "c_spec", 25.0)),
        seed=int(pick(args.seed, "seed", 0)),
        model_path=pick(args.model, "model", None),
        out_dir=pick(args.out, "out", "out"),
    )


def cmd_generate(args, parser) -> int:
    try:
        cfg = _run_config(args)
        if cfg.ls_source is None:
            parser.error("generate: --ls is required")
    except (OSError, tomli.TOMLDecodeError, ValueError) as exc:
        parser.error(f"generate: {exc}")
    try:
        results = runner.generate(cfg)
    except FileNotFoundError as exc:
        return _fail(EXIT_NO_MODEL, str(exc))
    except flow.FlowError as exc:
        return _fail(EXIT_NO_MODEL, f"unusable model: {exc}")
    except SearchError as exc:
        return _fail(EXIT_SIM_ABORT, f"simulation aborted at cs={list(exc.values)}: {exc.cause!r}")
    except (KeyError, ScenarioError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    for omega, res in results.items():
        print(f"omega={omega:g}: {len(res.species)} species, best G "
              f"{max(r.g for r in res.records):.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    ids = tuple(args.types.split(",")) if args.types else CATALOG_IDS
    try:
        cells, total = runner.score(args.out, ids, args.omegas or OMEGA_SET, args.n_s)
    except IncompleteGridError as exc:
        return _fail(EXIT_GRID, str(exc))
    except runner.RecordError as exc:
        return _fail(EXIT_GRID, str(exc))
    csv_path = Path(args.csv) if args.csv else Path(args.out) / "score.csv"
    csv_path.write_text(runner.score_csv(cells, total), encoding="utf-8")
    print(runner.score_table(cells, total, args.agent))
    print(f"Q = {total:.2f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        trace_path, ttc_path = runner.replay(args.record, args.out)
    except FileNotFoundError as exc:
        return _fail(EXIT_NO_RECORD, str(exc))
    except (runner.RecordError, KeyError, ScenarioError) as exc:
        return _fail(EXIT_NO_RECORD, f"unusable record: {exc}")
    print(f"trace -> {trace_path}\nttc series -> {ttc_path}")
    return EXIT_OK


def cmd_catalog(args) -> int:
    if args.show:
        try:
            print(serialize_scenario_config(catalog_entry(args.show)), end="")
        except KeyError as exc:
            return _fail(EXIT_USAGE, exc.args[0])
        return EXIT_OK
    for ls in builtin_catalog():
        print(f"{ls.id:<8} {ls.map_template:<13} D={ls.dim}  {ls.description}")
        for p in ls.parameters:
            print(f"    {p.name:<28} [{p.lower:g}, {p.upper:g}] {p.unit}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osg", description="Generate driving scenarios at a chosen risk level.")
    parser.add_argument("--version", action="version", version=f"osg {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a naturalness model for one logical scenario")
    p.add_argument("--ls", required=True, help="catalog id or scenario config path")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--csv", help="trajectory CSV in NGSIM column layout")
    src.add_argument("--synthetic", type=_positive_int, metavar="N",
                     help="use N synthetic events instead of recorded data")
    p.add_argument("--feet", action="store_true", help="CSV distances are in feet")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--out", help="model file (default models/<ls>.flow)")

    p = sub.add_parser("generate", help="search scenarios at one or more risk levels")
    p.add_argument("--ls", help="catalog id or scenario config path")
    p.add_argument("--omega", type=_omega_list, help="comma-separated risk levels in [0, 1]")
    p.add_argument("-N", "--population", type=_positive_int)
    p.add_argument("-M", "--iterations", type=_positive_int)
    p.add_argument("--c-spec", type=float, dest="c_spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", help="naturalness model (default models/<ls>.flow)")
    p.add_argument("--out", help="output root (default out)")
    p.add_argument("--config", help="TOML run config with a [generate] table")

    p = sub.add_parser("score", help="score a complete grid of generated cells")
    p.add_argument("--out", default="out", help="output root holding <ls>/<omega> cells")
    p.add_argument("--csv", help="summary CSV path (default <out>/score.csv)")
    p.add_argument("--types", help="comma-separated scenario ids (default: the catalog)")
    p.add_argument("--omegas", type=_omega_list, help="risk levels (default 0,0.3,0.5,0.7,1)")
    p.add_argument("--n-s", type=_positive_int, default=N_S, dest="n_s")
    p.add_argument("--agent", default="idm-ego", help="row label in the printed table")

    p = sub.add_parser("replay", help="re-simulate a stored scenario record")
    p.add_argument("record")
    p.add_argument("--out", default="replay", help="directory for the trace and TTC CSVs")

    p = sub.add_parser("catalog", help="list the built-in logical scenarios")
    p.add_argument("--show", metavar="ID", help="print one entry as a config document")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "generate":
        return cmd_generate(args, parser)
    return {"train": cmd_train, "score": cmd_score, "replay": cmd_replay,
            "catalog": cmd_catalog}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
