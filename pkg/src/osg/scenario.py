"""Scenario model: logical scenarios, concrete scenarios and their config files.

A logical scenario is a box of named parameters bound to a map template and
a set of actors. A concrete scenario is one point inside that box. Config
files are TOML documents; see ``osg/scenarios/*.toml`` for the canonical
catalog entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
import tomli

from osg import maps


class ScenarioError(Exception):
    """Base class for scenario-model errors."""


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


class DimensionError(ScenarioError, ValueError):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    lower: float
    upper: float
    unit: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ScenarioValidationError(
                f"parameter {self.name!r}: lower {self.lower} > upper {self.upper}"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class ActorTemplate:
    role: str  # "ego" | "npc"
    route: str
    behavior: str  # "idm_ego" | "scripted_npc"
    length_m: float = 4.5
    width_m: float = 2.0


@dataclass(frozen=True)
class LogicalScenario:
    id: str
    description: str
    parameters: tuple[ParameterSpec, ...]
    map_template: str
    actors: tuple[ActorTemplate, ...]
    horizon_s: float = 20.0
    dt_s: float = 0.1

    def __post_init__(self):
        validate(self)

    @property
    def dim(self) -> int:
        return len(self.parameters)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.parameters])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.parameters])

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.dt_s))

    @property
    def ego(self) -> ActorTemplate:
        return next(a for a in self.actors if a.role == "ego")

    @property
    def npcs(self) -> tuple[ActorTemplate, ...]:
        return tuple(a for a in self.actors if a.role == "npc")

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ConcreteScenario:
    ls_id: str
    values: tuple[float, ...]
    seed: int = 0

    def as_dict(self, ls: LogicalScenario) -> dict[str, float]:
        return dict(zip(ls.names, self.values))


def validate(ls: LogicalScenario) -> None:
    """Raise ScenarioValidationError if ``ls`` breaks any invariant."""
    if not ls.parameters:
        raise ScenarioValidationError(f"{ls.id}: at least one parameter is required")
    names = [p.name for p in ls.parameters]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ScenarioValidationError(f"{ls.id}: duplicate parameter names {dupes}")
    if ls.map_template not in maps.MAP_TEMPLATES:
        raise ScenarioValidationError(f"{ls.id}: unknown map template {ls.map_template!r}")
    known = maps.routes(ls.map_template)
    for actor in ls.actors:
        if actor.role not in ("ego", "npc"):
            raise ScenarioValidationError(f"{ls.id}: unknown actor role {actor.role!r}")
        if actor.behavior not in ("idm_ego", "scripted_npc"):
            raise ScenarioValidationError(f"{ls.id}: unknown behavior {actor.behavior!r}")
        if actor.route not in known:
            raise ScenarioValidationError(
                f"{ls.id}: route {actor.route!r} not on map {ls.map_template!r}"
            )
        if actor.length_m <= 0 or actor.width_m <= 0:
            raise ScenarioValidationError(f"{ls.id}: actor extents must be positive")
    n_ego = sum(a.role == "ego" for a in ls.actors)
    if n_ego != 1:
        raise ScenarioValidationError(f"{ls.id}: expected exactly one ego actor, got {n_ego}")
    if not (ls.horizon_s > 0 and ls.dt_s > 0):
        raise ScenarioValidationError(f"{ls.id}: horizon_s and dt_s must be positive")
    steps = ls.horizon_s / ls.dt_s
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ScenarioValidationError(f"{ls.id}: horizon_s / dt_s must be an integer")


def clamp_to_box(ls: LogicalScenario, values: Sequence[float], seed: int = 0) -> ConcreteScenario:
    """Clamp ``values`` coordinate-wise into the parameter box of ``ls``."""
    v = np.asarray(values, dtype=float)
    if v.shape != (ls.dim,):
        raise DimensionError(f"{ls.id}: expected {ls.dim} values, got {v.shape}")
    clipped = np.minimum(np.maximum(v, ls.lower), ls.upper)
    return ConcreteScenario(ls.id, tuple(float(x) for x in clipped), seed)


def check_concrete(ls: LogicalScenario, cs: ConcreteScenario) -> None:
    if len(cs.values) != ls.dim:
        raise DimensionError(f"{ls.id}: expected {ls.dim} values, got {len(cs.values)}")
    for p, x in zip(ls.parameters, cs.values):
        if not p.lower <= x <= p.upper:
            raise ScenarioValidationError(f"{p.name}={x} outside [{p.lower}, {p.upper}]")


# ---------------------------------------------------------------------------
# config files

def _require(table: dict, key: str, where: str):
    try:
        return table[key]
    except KeyError:
        raise ScenarioValidationError(f"{where}: missing key {key!r}") from None


def parse_scenario_config(text: str) -> LogicalScenario:
    """Parse and validate a TOML scenario document."""
    if not text.strip():
        raise ScenarioParseError("empty scenario document")
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioParseError(f"malformed scenario document: {exc}") from exc

    params = []
    for i, entry in enumerate(doc.get("parameter", [])):
        where = f"parameter #{i + 1}"
        name = str(_require(entry, "name", where))
        lower = float(_require(entry, "lower", name))
        upper = float(_require(entry, "upper", name))
        if lower > upper:
            raise ScenarioValidationError(f"{name}: lower {lower} > upper {upper}")
        params.append(ParameterSpec(name, lower, upper, str(entry.get("unit", "")),
                                    str(entry.get("description", ""))))
    actors = []
    for i, entry in enumerate(doc.get("actor", [])):
        where = f"actor #{i + 1}"
        actors.append(ActorTemplate(
            role=str(_require(entry, "role", where)),
            route=str(_require(entry, "route", where)),
            behavior=str(_require(entry, "behavior", where)),
            length_m=float(entry.get("length_m", 4.5)),
            width_m=float(entry.get("width_m", 2.0)),
        ))
    return LogicalScenario(
        id=str(_require(doc, "id", "document")),
        description=str(doc.get("description", "")),
        parameters=tuple(params),
        map_template=str(_require(doc, "map_template", "document")),
        actors=tuple(actors),
        horizon_s=float(doc.get("horizon_s", 20.0)),
        dt_s=float(doc.get("dt_s", 0.1)),
    )


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _toml_float(x: float) -> str:
    if not math.isfinite(x):
        raise ScenarioValidationError(f"non-finite value {x}")
    return repr(float(x))


def serialize_scenario_config(ls: LogicalScenario) -> str:
    """Render ``ls`` as a TOML document that ``parse_scenario_config`` reads back."""
    out = [
        f"id = {_toml_str(ls.id)}",
        f"description = {_toml_str(ls.description)}",
        f"map_template = {_toml_str(ls.map_template)}",
        f"horizon_s = {_toml_float(ls.horizon_s)}",
        f"dt_s = {_toml_float(ls.dt_s)}",
    ]
    for p in ls.parameters:
        out += [
            "",
            "[[parameter]]",
            f"name = {_toml_str(p.name)}",
            f"lower = {_toml_float(p.lower)}",
            f"upper = {_toml_float(p.upper)}",
            f"unit = {_toml_str(p.unit)}",
            f"description = {_toml_str(p.description)}",
        ]
    for a in ls.actors:
        out += [
            "",
            "[[actor]]",
            f"role = {_toml_str(a.role)}",
            f"route = {_toml_str(a.route)}",
            f"behavior = {_toml_str(a.behavior)}",
            f"length_m = {_toml_float(a.length_m)}",
            f"width_m = {_toml_float(a.width_m)}",
        ]
    return "\n".join(out) + "\n"


CATALOG_IDS = ("FB", "CutIn1", "CutIn2", "OVTP", "NJLT", "NJRT")


def builtin_catalog() -> list[LogicalScenario]:
    """The six built-in logical scenarios, in a fixed order."""
    pkg = resources.files("osg") / "scenarios"
    return [parse_scenario_config((pkg / f"{sid}.toml").read_text()) for sid in CATALOG_IDS]


def catalog_entry(ls_id: str) -> LogicalScenario:
    for ls in builtin_catalog():
        if ls.id == ls_id:
            return ls
    raise KeyError(f"no catalog scenario {ls_id!r}; known: {', '.join(CATALOG_IDS)}")


def load_scenario(source: str) -> LogicalScenario:
    """Resolve a catalog id or a path to a scenario config file."""
    if source in CATALOG_IDS:
        return catalog_entry(source)
    with open(source, encoding="utf-8") as fh:
        return parse_scenario_config(fh.read())
