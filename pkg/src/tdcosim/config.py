"""Run configuration: one YAML file describing inputs, scenario grid and solver options."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from tdcosim.controller import DEFAULT_MC_RULES, DEFAULT_RATING_RULES, McRule, RatingRule, rules_from_config
from tdcosim.cosim import CosimOptions
from tdcosim.demand import (
    ADOPTIONS,
    CHARGE_RATES,
    CORRIDOR_DEPOTS,
    LOGICS,
    SEASONS,
    FleetSpec,
    ScenarioParams,
    scenario_grid,
)
from tdcosim.errors import ConfigError
from tdcosim.opf import OpfOptions

_TOP_KEYS = {"network", "feeders", "trips", "depots", "output", "seed", "scenarios", "fleet", "opf", "cosim",
             "controller", "ratings", "capital_costs", "load_shape", "bbox_margin_m"}


@dataclass
class RunConfig:
    network: Path
    feeders: list[Path]
    trips: Path
    depots: Path
    scenarios: list[ScenarioParams]
    fleet: FleetSpec
    seed: int = 0
    output: Path | None = None
    opf: OpfOptions = field(default_factory=OpfOptions)
    cosim: CosimOptions = field(default_factory=CosimOptions)
    mc_rules: tuple[McRule, ...] = DEFAULT_MC_RULES
    compare_controller: bool = False
    rating_rules: tuple[RatingRule, ...] = DEFAULT_RATING_RULES
    transmission_unit_cost: float = 1.0e6
    distribution_unit_cost: float = 1.0e5
    load_shape: np.ndarray = field(default_factory=lambda: np.ones(24))
    bbox_margin_m: float = 2000.0
    source: Path | None = None

    def check_files(self) -> None:
        """Raise FileNotFoundError naming the first missing input."""
        for p in [self.network, *self.feeders, self.trips, self.depots]:
            if not p.is_file():
                raise FileNotFoundError(f"input file not found: {p}")


def _section(data, key, kind=dict):
    val = data.get(key)
    if val is None:
        return kind()
    if not isinstance(val, kind):
        raise ConfigError(f"{key}: expected a {kind.__name__}, got {type(val).__name__}")
    return val


def _as_list(val, key):
    if isinstance(val, (list, tuple)):
        return list(val)
    if val is None:
        raise ConfigError(f"{key}: missing")
    return [val]


def _grid(spec: dict, seed: int) -> list[ScenarioParams]:
    unknown = set(spec) - {"charge_rate", "season", "adoption", "logic", "corridor_depot"}
    if unknown:
        raise ConfigError(f"scenarios: unknown field(s) {sorted(unknown)}")
    dims = {
        "charge_rate": (CHARGE_RATES, float),
        "season": (SEASONS, str),
        "adoption": (ADOPTIONS, float),
        "logic": (LOGICS, str),
        "corridor_depot": (CORRIDOR_DEPOTS, str),
    }
    values = {}
    for key, (allowed, cast) in dims.items():
        raw = spec.get(key, list(allowed))
        vals = []
        for v in _as_list(raw, f"scenarios.{key}"):
            try:
                v = cast(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"scenarios.{key}: bad value {v!r}") from exc
            if v not in allowed:
                raise ConfigError(f"scenarios.{key}: {v!r} is not one of {list(allowed)}")
            if v not in vals:
                vals.append(v)
        if not vals:
            raise ConfigError(f"scenarios.{key}: empty list")
        values[key] = vals
    return scenario_grid(values["charge_rate"], values["season"], values["adoption"], values["logic"],
                         values["corridor_depot"], seed)


def _rating_rules(rows) -> tuple[RatingRule, ...]:
    out = []
    for i, r in enumerate(rows):
        try:
            window = r.get("window_hours")
            out.append(RatingRule(str(r["season"]), str(r["class"]), float(r["multiplier"]),
                                  math.inf if window is None else float(window)))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"ratings[{i}]: {exc}") from exc
    if not out:
        raise ConfigError("ratings: empty table")
    return tuple(out)


def _options(cls, data, key):
    try:
        return cls.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed YAML mapping; relative paths resolve against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
    base_dir = Path(base_dir or ".")

    def path(key):
        val = data.get(key)
        if not isinstance(val, str) or not val:
            raise ConfigError(f"{key}: a file path is required")
        p = Path(val)
        return p if p.is_absolute() else base_dir / p

    feeders_raw = data.get("feeders")
    if isinstance(feeders_raw, str):
        fdir = Path(feeders_raw) if Path(feeders_raw).is_absolute() else base_dir / feeders_raw
        feeders = sorted(fdir.glob("*.json")) if fdir.is_dir() else [fdir]
    elif isinstance(feeders_raw, list) and feeders_raw:
        feeders = [Path(p) if Path(p).is_absolute() else base_dir / p for p in feeders_raw]
    else:
        raise ConfigError("feeders: a directory or a list of feeder files is required")

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")

    fleet_raw = _section(data, "fleet")
    try:
        fleet = FleetSpec(**fleet_raw)
    except TypeError as exc:
        raise ConfigError(f"fleet: {exc}") from exc

    ctl = _section(data, "controller")
    unknown = set(ctl) - {"enabled", "compare", "rules"}
    if unknown:
        raise ConfigError(f"controller: unknown field(s) {sorted(unknown)}")
    rules = rules_from_config(ctl["rules"]) if "rules" in ctl else DEFAULT_MC_RULES
    cosim_raw = dict(_section(data, "cosim"))
    if "enabled" in ctl:
        cosim_raw["controller"] = bool(ctl["enabled"])
    cosim = _options(CosimOptions, cosim_raw, "cosim")

    costs = _section(data, "capital_costs")
    shape = data.get("load_shape")
    if shape is None:
        shape = np.ones(24)
    else:
        try:
            shape = np.asarray(shape, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"load_shape: {exc}") from exc
        if shape.shape != (24,) or np.any(shape < 0):
            raise ConfigError("load_shape: expected 24 non-negative values")

    scenarios = _grid(_section(data, "scenarios"), seed)
    out = data.get("output")
    try:
        return RunConfig(
            network=path("network"), feeders=feeders, trips=path("trips"), depots=path("depots"),
            scenarios=scenarios, fleet=fleet, seed=seed,
            output=None if out is None else (Path(out) if Path(out).is_absolute() else base_dir / out),
            opf=_options(OpfOptions, _section(data, "opf"), "opf"), cosim=cosim,
            mc_rules=rules, compare_controller=bool(ctl.get("compare", False)),
            rating_rules=_rating_rules(data["ratings"]) if "ratings" in data else DEFAULT_RATING_RULES,
            transmission_unit_cost=float(costs.get("transmission", 1.0e6)),
            distribution_unit_cost=float(costs.get("distribution", 1.0e5)),
            load_shape=shape, bbox_margin_m=float(data.get("bbox_margin_m", 2000.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: malformed YAML{where}: {getattr(exc, 'problem', exc)}") from exc
    cfg = parse_config(data, path.parent)
    cfg.source = path
    return cfg
