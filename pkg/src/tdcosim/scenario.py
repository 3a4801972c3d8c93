"""Scenario pipeline: demand generation, spatial mapping, co-simulation and reports.

One scenario produces, in its own directory:

* ``hour_HH.csv`` (24 files) -- long-format timestep table with bus, branch,
  boundary and controller-action rows;
* ``hourly.csv`` -- one row per hour of cost, EV energy and violation counts;
* ``profile.csv`` and ``node_ev.csv`` -- the demand and its feeder-node mapping;
* ``lmp_map.geojson`` and ``overload_map.geojson`` -- map overlays;
* ``capital_cost.csv`` -- the remediation cost proxy.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tdcosim.controller import VIOLATION, estimate_capital_cost
from tdcosim.cosim import CosimCase, DayResult, run_day
from tdcosim.demand import (
    DemandProfile,
    ScenarioParams,
    generate_demand,
    read_depots_csv,
    read_trips_csv,
    write_profile_csv,
)
from tdcosim.feeder import Feeder, load_feeder
from tdcosim.grid import Network, load_case
from tdcosim.spatial import (
    BBox,
    ChargerSite,
    Projection,
    Seed,
    aggregate_to_substation,
    build_voronoi,
    map_chargers,
    partition_to_geojson,
    write_geojson,
)

logger = logging.getLogger(__name__)

SUMMARY_FIELDS = ["scenario", "charge_rate_kw", "season", "adoption", "logic", "corridor_depot", "seed",
                  "controller", "operating_cost", "penalty_cost", "ev_demanded_kwh", "ev_served_kwh",
                  "ev_shed_kwh", "unassigned_kwh", "transmission_violation_hours", "transmission_overloads",
                  "distribution_overloads", "transmission_capital_cost", "distribution_capital_cost",
                  "max_rounds"]


@dataclass
class Territories:
    projection: Projection
    partition: object  # VoronoiPartition over feeder nodes
    substations: object  # the same cells grouped by boundary bus
    node_of_seed: dict[int, tuple[int, int]]


@dataclass
class Inputs:
    network: Network
    feeders: list[Feeder]
    trips: list
    depots: list
    territories: Territories


def build_territories(feeders, margin_m: float = 2000.0) -> Territories:
    """Voronoi cells around every located feeder node, grouped by head bus.

    Nodes sharing a location with an earlier node (in feeder, node order)
    get no cell of their own.
    """
    located = sorted((f.id, nd.id, nd.location) for f in feeders for nd in f.nodes if nd.location is not None)
    if not located:
        raise ValueError("no feeder node carries a location")
    lat0 = float(np.mean([loc[0] for _, _, loc in located]))
    lon0 = float(np.mean([loc[1] for _, _, loc in located]))
    proj = Projection(lat0, lon0)
    seeds, node_of, seen = [], {}, set()
    for fid, nid, loc in located:
        x, y = proj.to_xy(*loc)
        key = (round(float(x), 6), round(float(y), 6))
        if key in seen:
            continue
        seen.add(key)
        sid = len(seeds)
        seeds.append(Seed(sid, (float(x), float(y)), "distribution-node"))
        node_of[sid] = (fid, nid)
    pts = np.array([s.point for s in seeds])
    lo, hi = pts.min(axis=0) - margin_m, pts.max(axis=0) + margin_m
    bbox = BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
    part = build_voronoi(seeds, bbox)
    head = {f.id: f.head_bus for f in feeders}
    subs = aggregate_to_substation(part, {sid: head[fid] for sid, (fid, _) in node_of.items()})
    return Territories(proj, part, subs, node_of)


def load_inputs(cfg) -> Inputs:
    cfg.check_files()
    net = load_case(cfg.network)
    feeders = [load_feeder(p) for p in cfg.feeders]
    trips = read_trips_csv(cfg.trips)
    depots = read_depots_csv(cfg.depots)
    return Inputs(net, feeders, trips, depots, build_territories(feeders, cfg.bbox_margin_m))


@dataclass
class MappedDemand:
    node_ev: dict[tuple[int, int], np.ndarray]
    daily_kwh_by_seed: dict[int, float]
    unassigned: list[tuple]  # (lat, lon, kind, kWh) outside the territory box
    total_kwh: float
    assigned_kwh: float


def map_profile(profile: DemandProfile, terr: Territories) -> MappedDemand:
    """Attach each demand location to the feeder node whose cell contains it."""
    keys = sorted(profile.kw)
    sites = []
    for i, (loc, kind) in enumerate(keys):
        x, y = terr.projection.to_xy(*loc)
        sites.append(ChargerSite(i, (float(x), float(y)), kind, float(math.fsum(profile.kw[(loc, kind)]))))
    assign = map_chargers(sites, terr.partition)
    parts: dict[tuple[int, int], list[np.ndarray]] = {}
    for i, (loc, kind) in enumerate(keys):
        if i in assign.region_of:
            node = terr.node_of_seed[assign.region_of[i]]
            parts.setdefault(node, []).append(profile.kw[(loc, kind)])
    node_ev = {node: np.sum(np.vstack(v), axis=0) for node, v in sorted(parts.items())}
    lost = [(keys[i][0][0], keys[i][0][1], keys[i][1], sites[i].demand_kw) for i in assign.unassigned]
    return MappedDemand(node_ev, assign.kw_by_region, lost, assign.total_in_kw, assign.total_assigned_kw)


# ---------------------------------------------------------------- writers

def _f(v: float, digits: int = 6) -> str:
    return f"{v:.{digits}f}"


def write_timestep_csv(res, network: Network, path) -> None:
    """Long table: ``section, id, quantity, value, unit``."""
    opf = res.opf
    loading = opf.loading(network)
    classes = {k: cls for k, _, cls in res.transmission_overloads}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "id", "quantity", "value", "unit"])
        for i, bid in enumerate(opf.bus_ids):
            w.writerow(["bus", bid, "v_mag", _f(opf.pf.v_mag[i], 8), "pu"])
            w.writerow(["bus", bid, "v_ang", _f(opf.pf.v_ang[i], 8), "rad"])
            w.writerow(["bus", bid, "lmp", _f(opf.lmp[i]), "$/MWh"])
            w.writerow(["bus", bid, "unserved", _f(opf.unserved_p[i]), "MW"])
        for k, br in enumerate(network.branches):
            w.writerow(["branch", k, "p_from", _f(opf.branch_flows[k, 0]), "MW"])
            w.writerow(["branch", k, "q_from", _f(opf.branch_flows[k, 1]), "MVAr"])
            w.writerow(["branch", k, "s_from", _f(opf.branch_flows[k, 2]), "MVA"])
            if not np.isnan(loading[k]):
                w.writerow(["branch", k, "loading", _f(100 * loading[k], 4), "%"])
            if k in classes:
                w.writerow(["branch", k, "class", classes[k], ""])
        for rec in res.boundary:
            w.writerow(["boundary", rec.bus, "p", _f(rec.p_mw), "MW"])
            w.writerow(["boundary", rec.bus, "q", _f(rec.q_mvar), "MVAr"])
            w.writerow(["boundary", rec.bus, "rounds", rec.stamp, ""])
        for fid, ov in res.distribution_overloads:
            w.writerow(["feeder", fid, f"{ov.element}_{ov.index}_loading", _f(100 * ov.ratio, 4), "%"])
        for a in res.actions:
            w.writerow(["action", a.bus, "lmp", _f(a.lmp), "$/MWh"])
            w.writerow(["action", a.bus, "threshold", _f(a.threshold, 2), "$/MWh"])
            w.writerow(["action", a.bus, "retained", _f(a.retained), "kW"])
            w.writerow(["action", a.bus, "delayed" if a.action == "delay" else "shed", _f(a.moved), "kW"])


HOURLY_FIELDS = ["hour", "rounds", "operating_cost", "penalty_cost", "ev_demand_kw", "ev_served_kw",
                 "ev_shed_kw", "ev_carry_out_kw", "controller_actions", "transmission_overloads",
                 "transmission_violations", "distribution_overloads", "max_dp_mw", "max_dv_pu"]


def write_hourly_csv(day: DayResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HOURLY_FIELDS)
        for h in day.hours:
            dp, dv = h.mismatch_trace[-1] if h.mismatch_trace else (0.0, 0.0)
            w.writerow([h.hour, h.rounds, _f(h.cost), _f(h.opf.penalty_total), _f(h.ev_demand_kw),
                        _f(h.ev_served_kw), _f(h.ev_shed_kw), _f(h.ev_carry_out_kw), len(h.actions),
                        len(h.transmission_overloads), h.violation_count(), len(h.distribution_overloads),
                        f"{dp:.3e}", f"{dv:.3e}"])


def write_node_ev_csv(mapped: MappedDemand, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feeder", "node", "hour", "kw"])
        for (fid, nid), prof in sorted(mapped.node_ev.items()):
            for h, v in enumerate(prof):
                if v != 0.0:
                    w.writerow([fid, nid, h, _f(float(v))])


def lmp_overlay(day: DayResult, terr: Territories, mapped: MappedDemand, feeders) -> dict:
    """Substation territories carrying hourly boundary-bus LMPs."""
    head = {f.id: f.head_bus for f in feeders}
    props = {}
    for bus in terr.substations.region_ids:
        lmps = [h.opf.lmp_at(bus) for h in day.hours]
        ev = math.fsum(float(np.sum(p)) for (fid, _), p in sorted(mapped.node_ev.items()) if head[fid] == bus)
        props[bus] = {"bus": bus, "peak_lmp": round(max(lmps), 6),
                      "lmp": [round(v, 6) for v in lmps], "ev_kwh": round(ev, 6)}
    return partition_to_geojson(terr.substations, terr.projection, props)


def overload_overlay(day: DayResult, network: Network, feeders) -> dict:
    """Transmission branches and overloaded feeder elements as line features."""
    loc = {b.id: b.location for b in network.buses}
    features = []
    for k, br in enumerate(network.branches):
        hours = [h.hour for h in day.hours if any(o[0] == k for o in h.transmission_overloads)]
        worst = max((o[1] for h in day.hours for o in h.transmission_overloads if o[0] == k), default=0.0)
        viol = any(o[0] == k and o[2] == VIOLATION for h in day.hours for o in h.transmission_overloads)
        peak = max(float(h.opf.loading(network)[k]) if br.s_rating > 0 else 0.0 for h in day.hours)
        a, b = loc.get(br.from_bus), loc.get(br.to_bus)
        geom = None
        if a is not None and b is not None:
            geom = {"type": "LineString", "coordinates": [[a[1], a[0]], [b[1], b[0]]]}
        features.append({"type": "Feature", "geometry": geom, "properties": {
            "layer": "transmission", "branch": k, "from_bus": br.from_bus, "to_bus": br.to_bus,
            "overloaded": bool(hours), "violation": viol, "overload_hours": hours,
            "peak_loading_pct": round(100 * peak, 4), "worst_overload_pct": round(100 * worst, 4)}})
    by_id = {f.id: f for f in feeders}
    seen: dict[tuple, list] = {}
    for h in day.hours:
        for fid, ov in h.distribution_overloads:
            seen.setdefault((fid, ov.element, ov.index), []).append((h.hour, ov.ratio))
    for (fid, element, index), rows in sorted(seen.items()):
        f = by_id[fid]
        if element == "segment":
            e = f.segments[index]
        else:
            e = f.transformers[index]
        nodes = {nd.id: nd.location for nd in f.nodes}
        a, b = nodes.get(e.from_node), nodes.get(e.to_node)
        geom = None
        if a is not None and b is not None:
            geom = {"type": "LineString", "coordinates": [[a[1], a[0]], [b[1], b[0]]]}
        features.append({"type": "Feature", "geometry": geom, "properties": {
            "layer": "distribution", "feeder": fid, "element": element, "index": index, "overloaded": True,
            "overload_hours": [r[0] for r in rows], "worst_overload_pct": round(100 * max(r[1] for r in rows), 4)}})
    return {"type": "FeatureCollection", "features": features}


# ---------------------------------------------------------------- scenario

def capital_cost(day: DayResult, cfg):
    t = [k for h in day.hours for k, _, _ in h.transmission_overloads]
    d = [(fid, ov.element, ov.index) for h in day.hours for fid, ov in h.distribution_overloads]
    return estimate_capital_cost(t, d, cfg.transmission_unit_cost, cfg.distribution_unit_cost)


def simulate(params: ScenarioParams, inputs: Inputs, cfg, controller: bool | None = None):
    """Demand, mapping and one co-simulated day; nothing is written."""
    demand = generate_demand(inputs.trips, inputs.depots, params, cfg.fleet)
    mapped = map_profile(demand.profile, inputs.territories)
    case = CosimCase(inputs.network, inputs.feeders, mapped.node_ev, cfg.load_shape)
    opts = cfg.cosim
    opts = type(opts)(**{**opts.__dict__, "season": params.season,
                         "controller": opts.controller if controller is None else controller})
    day = run_day(case, opts, cfg.opf, cfg.rating_rules, cfg.mc_rules)
    return demand, mapped, day


def summary_row(params: ScenarioParams, day: DayResult, mapped: MappedDemand, cfg, controller: bool) -> dict:
    cap = capital_cost(day, cfg)
    return {
        "scenario": params.name, "charge_rate_kw": int(params.charge_rate), "season": params.season,
        "adoption": params.adoption, "logic": params.logic, "corridor_depot": params.corridor_depot,
        "seed": params.seed, "controller": int(controller),
        "operating_cost": _f(day.total_cost), "penalty_cost": _f(day.total_penalty),
        "ev_demanded_kwh": _f(day.demanded_kwh), "ev_served_kwh": _f(day.served_kwh),
        "ev_shed_kwh": _f(day.shed_kwh),
        "unassigned_kwh": _f(math.fsum(u[3] for u in mapped.unassigned)),
        "transmission_violation_hours": sum(1 for v in day.violations_by_hour() if v),
        "transmission_overloads": len(cap.transmission_elements),
        "distribution_overloads": len(cap.distribution_elements),
        "transmission_capital_cost": _f(cap.transmission_cost, 2),
        "distribution_capital_cost": _f(cap.distribution_cost, 2),
        "max_rounds": max(h.rounds for h in day.hours),
    }


def write_day(out: Path, day: DayResult, inputs: Inputs, mapped: MappedDemand, cfg) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for h in day.hours:
        write_timestep_csv(h, inputs.network, out / f"hour_{h.hour:02d}.csv")
    write_hourly_csv(day, out / "hourly.csv")
    write_geojson(lmp_overlay(day, inputs.territories, mapped, inputs.feeders), out / "lmp_map.geojson")
    write_geojson(overload_overlay(day, inputs.network, inputs.feeders), out / "overload_map.geojson")
    cap = capital_cost(day, cfg)
    with open(out / "capital_cost.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "elements", "unit_cost", "cost"])
        w.writerow(["transmission", len(cap.transmission_elements), _f(cfg.transmission_unit_cost, 2),
                    _f(cap.transmission_cost, 2)])
        w.writerow(["distribution", len(cap.distribution_elements), _f(cfg.distribution_unit_cost, 2),
                    _f(cap.distribution_cost, 2)])


def run_scenario(params: ScenarioParams, inputs: Inputs, cfg, out_dir) -> list[dict]:
    """Run one scenario (twice when comparing controller settings) and write its artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    settings = [cfg.cosim.controller]
    if cfg.compare_controller:
        settings = [False, True]
    demand = mapped = None
    for ctl in settings:
        demand, mapped, day = simulate(params, inputs, cfg, controller=ctl)
        target = out_dir / ("controlled" if ctl else "uncontrolled") if len(settings) > 1 else out_dir
        write_day(target, day, inputs, mapped, cfg)
        rows.append(summary_row(params, day, mapped, cfg, ctl))
    write_profile_csv(demand.profile, out_dir / "profile.csv")
    write_node_ev_csv(mapped, out_dir / "node_ev.csv")
    if mapped.unassigned:
        with open(out_dir / "unassigned.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lat", "lon", "kind", "kwh"])
            for lat, lon, kind, kwh in mapped.unassigned:
                w.writerow([lat, lon, kind, _f(kwh)])
    return rows


def write_summary(rows: list[dict], path) -> None:
    rows = sorted(rows, key=lambda r: (r["scenario"], r["controller"]))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


COMPARISON_FIELDS = ["charging_logic", "baseline", "comparison", "pairs", "operating_cost_difference",
                     "transmission_capital_cost_difference", "distribution_capital_cost_difference"]


def compare_scenarios(rows: list[dict]) -> list[dict]:
    """Average cost differences between scenarios one step apart in a single parameter.

    Adoption steps are averaged over both charging logics; logic and
    charge-rate steps are grouped as in the capital cost summary layout.
    Differences are comparison minus baseline.
    """
    keyed = {}
    for r in rows:
        key = (float(r["charge_rate_kw"]), r["season"], float(r["adoption"]), r["logic"], r["corridor_depot"],
               int(r["seed"]), int(r["controller"]))
        keyed[key] = r

    def diff(step):
        pairs = []
        for key, r in sorted(keyed.items()):
            other = step(key)
            if other is not None and other in keyed:
                o = keyed[other]
                pairs.append([float(o[c]) - float(r[c]) for c in
                              ("operating_cost", "transmission_capital_cost", "distribution_capital_cost")])
        return pairs

    out = []

    def add(logic, base, comp, pairs):
        if pairs:
            m = np.mean(np.array(pairs), axis=0)
            out.append({"charging_logic": logic, "baseline": base, "comparison": comp, "pairs": len(pairs),
                        "operating_cost_difference": _f(m[0], 2),
                        "transmission_capital_cost_difference": _f(m[1], 2),
                        "distribution_capital_cost_difference": _f(m[2], 2)})

    adoptions = sorted({k[2] for k in keyed})
    for a, b in zip(adoptions, adoptions[1:]):
        add("both", f"{a:.0%} adoption", f"{b:.0%} adoption",
            diff(lambda k, a=a, b=b: (k[0], k[1], b, *k[3:]) if k[2] == a else None))
    add("both", "upon-arrival", "start-at-midnight",
        diff(lambda k: (k[0], k[1], k[2], "start-at-midnight", *k[4:]) if k[3] == "upon-arrival" else None))
    rates = sorted({k[0] for k in keyed})
    for logic in ("start-at-midnight", "upon-arrival"):
        for a, b in zip(rates, rates[1:]):
            add(logic, f"{a:.0f} kW", f"{b:.0f} kW",
                diff(lambda k, a=a, b=b, logic=logic: (b, *k[1:]) if k[0] == a and k[3] == logic else None))
    return out


def write_comparison(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for r in compare_scenarios(rows):
            w.writerow(r)
