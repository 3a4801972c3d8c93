"""Hourly transmission-distribution co-simulation.

Within an hour the two sides exchange boundary variables in synchronous
rounds: every feeder is solved at the current boundary bus voltage, the
feeder head powers are summed into boundary loads, the transmission OPF is
solved with those loads, and its boundary voltages are pushed back down.
The exchange stops once both the boundary voltages and loads stop moving.

Across hours, EV load delayed by the marginal-cost controller is carried to
the same feeder nodes in the next hour.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tdcosim.controller import (
    DEFAULT_MC_RULES,
    DEFAULT_RATING_RULES,
    NORMAL,
    VIOLATION,
    ControllerAction,
    apply_mc_controller,
    classify_loading,
)
from tdcosim.errors import ConfigError, ModelError, NonConvergenceError, SolverError
from tdcosim.feeder import (
    DistSolution,
    Feeder,
    Overload,
    aggregate_boundary,
    balanced_head_voltage,
    feeder_overloads,
    solve_feeder,
)
from tdcosim.grid import Network
from tdcosim.opf import OpfOptions, OpfSolution, solve_acopf

logger = logging.getLogger(__name__)

SEASON_RATING = {"peak": "summer", "shoulder": "winter"}


@dataclass(frozen=True)
class BoundaryRecord:
    bus: int
    v_mag: float
    v_ang: float
    p_mw: float
    q_mvar: float
    stamp: int  # exchange round that produced the record


@dataclass(frozen=True)
class CosimOptions:
    v_tol: float = 1e-4  # pu
    p_tol: float = 1e-3  # MW
    max_rounds: int = 20
    relax_after: int = 5
    relaxation: float = 0.5
    feeder_tol: float = 1e-6
    feeder_max_sweeps: int = 50
    controller: bool = True
    season: str = "peak"

    @classmethod
    def from_dict(cls, data: dict | None) -> CosimOptions:
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown co-simulation options {sorted(unknown)}")
        return cls(**data)


@dataclass
class CosimCase:
    """Transmission network, its feeders and per-node hourly EV demand.

    ``node_ev`` maps ``(feeder id, node id)`` to 24 hourly kW values; the
    load is split equally over the node's phases.  ``load_shape`` scales
    every background load (transmission and feeder) hour by hour.
    """

    network: Network
    feeders: list[Feeder]
    node_ev: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    load_shape: np.ndarray = field(default_factory=lambda: np.ones(24))

    def __post_init__(self):
        ids = [f.id for f in self.feeders]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate feeder ids")
        for f in self.feeders:
            if f.head_bus not in self.network.bus_index:
                raise ModelError(f"feeder {f.id} hangs off unknown bus {f.head_bus}")
        self.load_shape = np.asarray(self.load_shape, dtype=float)
        if self.load_shape.shape != (24,):
            raise ModelError("load_shape needs 24 hourly values")
        self._by_id = {f.id: f for f in self.feeders}
        self._phases = {f.id: {nd.id: nd.phases for nd in f.nodes} for f in self.feeders}
        for (fid, nid), prof in self.node_ev.items():
            if fid not in self._by_id or nid not in self._phases[fid]:
                raise ModelError(f"EV demand at unknown feeder node {(fid, nid)}")
            if np.shape(prof) != (24,) or np.any(np.asarray(prof) < 0):
                raise ModelError(f"EV demand at {(fid, nid)} must be 24 non-negative values")

    @property
    def substation_map(self) -> dict[int, int]:
        return {f.id: f.head_bus for f in self.feeders}

    def boundary_buses(self) -> list[int]:
        return sorted({f.head_bus for f in self.feeders})

    def hour_network(self, hour: int) -> Network:
        s = float(self.load_shape[hour])
        if s == 1.0:
            return self.network
        loads = tuple(replace(ld, p_base=ld.p_base * s, q_base=ld.q_base * s) for ld in self.network.loads)
        return replace(self.network, loads=loads)

    def hour_feeders(self, hour: int, ev_kw: dict[tuple[int, int], float]) -> list[Feeder]:
        """Feeders with background loads scaled and this hour's EV installed."""
        s = float(self.load_shape[hour])
        per_feeder: dict[int, list] = {f.id: [] for f in self.feeders}
        for (fid, nid) in sorted(ev_kw):
            kw = ev_kw[(fid, nid)]
            if kw > 0:
                phases = self._phases[fid][nid]
                for ph in phases:
                    per_feeder[fid].append((nid, ph, kw / len(phases)))
        out = []
        for f in self.feeders:
            g = f.scaled(s) if s != 1.0 else f
            out.append(g.with_ev_loads(per_feeder[f.id]))
        return out

    def ev_by_bus(self, ev_kw: dict[tuple[int, int], float]) -> dict[int, float]:
        out = {b: 0.0 for b in self.boundary_buses()}
        parts: dict[int, list[float]] = {b: [] for b in out}
        for (fid, nid) in sorted(ev_kw):
            parts[self._by_id[fid].head_bus].append(ev_kw[(fid, nid)])
        return {b: math.fsum(v) for b, v in parts.items()}


@dataclass
class TimestepResult:
    hour: int
    opf: OpfSolution
    feeder_solutions: dict[int, DistSolution]
    rounds: int
    converged: bool
    boundary: list[BoundaryRecord]
    mismatch_trace: list[tuple[float, float]]  # (max |dP| MW, max |dV| pu) per round
    actions: list[ControllerAction] = field(default_factory=list)
    ev_demand_kw: float = 0.0  # EV load presented before control (incl. carry-in)
    ev_served_kw: float = 0.0
    ev_shed_kw: float = 0.0
    ev_carry_out_kw: float = 0.0
    transmission_overloads: list[tuple[int, float, str]] = field(default_factory=list)  # (branch, ratio, class)
    distribution_overloads: list[tuple[int, Overload]] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.opf.objective

    def violation_count(self) -> int:
        return sum(1 for _, _, cls in self.transmission_overloads if cls == VIOLATION)


def _solve_feeders(feeders, volts, opts: CosimOptions) -> dict[int, DistSolution]:
    out = {}
    for f in feeders:
        vm, va = volts[f.head_bus]
        out[f.id] = solve_feeder(f, balanced_head_voltage(f, vm, va), tol=opts.feeder_tol,
                                 max_sweeps=opts.feeder_max_sweeps)
    return out


def _opf_with_boundary(net: Network, agg, opf_options, warm) -> OpfSolution:
    extra = {bus: (bp.p_mw, bp.q_mvar) for bus, bp in agg.items()}
    return solve_acopf(net.with_added_loads(extra), opf_options, start=warm)


def converge_timestep(hour: int, net: Network, feeders: list[Feeder], opts: CosimOptions | None = None,
                      opf_options: OpfOptions | None = None, start_volts: dict | None = None,
                      warm: OpfSolution | None = None, relax_from: int | None = None) -> TimestepResult:
    """Fixed-point exchange of boundary voltages and loads for one hour.

    A pre-solve runs the feeders at ``start_volts`` (nominal by default) and
    the OPF with the resulting loads.  Each round then solves the feeders at
    the boundary voltages of the previous OPF and re-solves the OPF with the
    new loads.  Converged when, within a round, the boundary loads moved by
    at most ``p_tol`` MW and the OPF boundary voltages differ from the ones
    the feeders saw by at most ``v_tol`` pu.  After round ``relax_after`` the
    voltages passed down are under-relaxed.

    Raises:
        NonConvergenceError: ``max_rounds`` reached; carries the mismatch trace.
    """
    opts = opts or CosimOptions()
    relax_from = opts.relax_after if relax_from is None else relax_from
    smap = {f.id: f.head_bus for f in feeders}
    buses = sorted(set(smap.values()))
    idx = net.bus_index
    volts = dict(start_volts) if start_volts else {}
    for b in buses:
        volts.setdefault(b, (1.0, 0.0))

    def boundary_volts(opf):
        return {b: (float(opf.pf.v_mag[idx[b]]), float(opf.pf.v_ang[idx[b]])) for b in buses}

    sols = _solve_feeders(feeders, volts, opts)
    agg = aggregate_boundary(sols, smap)
    opf = _opf_with_boundary(net, agg, opf_options, warm)
    push = boundary_volts(opf)
    trace: list[tuple[float, float]] = []
    converged = False
    rounds = 0
    while rounds < opts.max_rounds:
        rounds += 1
        sols = _solve_feeders(feeders, push, opts)
        new_agg = aggregate_boundary(sols, smap)
        dp = max((max(abs(new_agg[b].p_mw - agg[b].p_mw), abs(new_agg[b].q_mvar - agg[b].q_mvar))
                  for b in buses), default=0.0)
        agg = new_agg
        opf = _opf_with_boundary(net, agg, opf_options, opf)
        target = boundary_volts(opf)
        dv = max((abs(target[b][0] * np.exp(1j * target[b][1]) - push[b][0] * np.exp(1j * push[b][1]))
                  for b in buses), default=0.0)
        trace.append((float(dp), float(dv)))
        if dp <= opts.p_tol and dv <= opts.v_tol:
            converged = True
            break
        if rounds >= relax_from:
            w = opts.relaxation
            push = {b: (push[b][0] + w * (target[b][0] - push[b][0]),
                        push[b][1] + w * (target[b][1] - push[b][1])) for b in buses}
        else:
            push = target

    if not converged:
        raise NonConvergenceError(f"hour {hour}: boundary exchange did not converge",
                                  trace[-1][0] if trace else float("nan"), rounds, trace)
    records = [BoundaryRecord(b, push[b][0], push[b][1], agg[b].p_mw, agg[b].q_mvar, rounds) for b in buses]
    return TimestepResult(hour=hour, opf=opf, feeder_solutions=sols, rounds=rounds, converged=True,
                          boundary=records, mismatch_trace=trace)


def _converge_with_fallback(hour, net, feeders, opts, opf_options, volts, warm):
    try:
        return converge_timestep(hour, net, feeders, opts, opf_options, volts, warm)
    except NonConvergenceError as exc:
        logger.warning("hour %d: %s; retrying with relaxation from the first round", hour, exc)
        return converge_timestep(hour, net, feeders, opts, opf_options, volts, warm, relax_from=0)


@dataclass
class DayResult:
    hours: list[TimestepResult]
    demanded_kwh: float
    served_kwh: float
    shed_kwh: float

    @property
    def total_cost(self) -> float:
        return math.fsum(h.opf.objective for h in self.hours)

    @property
    def total_penalty(self) -> float:
        return math.fsum(h.opf.penalty_total for h in self.hours)

    def violations_by_hour(self) -> list[int]:
        return [h.violation_count() for h in self.hours]


class DayAbort(SolverError):
    """A timestep failed; ``completed`` holds the hours solved before it."""

    def __init__(self, message, completed):
        super().__init__(message)
        self.completed = completed


def run_day(case: CosimCase, opts: CosimOptions | None = None, opf_options: OpfOptions | None = None,
            rating_rules=DEFAULT_RATING_RULES, mc_rules=DEFAULT_MC_RULES, hours=range(24)) -> DayResult:
    """Solve the hours in order, applying the controller and carrying delayed load.

    With the controller on, each hour is solved, the controller acts on the
    boundary-bus LMPs, and the hour is solved again with the reduced load;
    the reported results are the post-action ones.
    """
    opts = opts or CosimOptions()
    season = SEASON_RATING.get(opts.season, opts.season)
    carry: dict[tuple[int, int], float] = {}
    results: list[TimestepResult] = []
    volts = None
    warm = None
    over_hours: dict[int, int] = {}  # consecutive hours above normal rating
    demanded, served, shed_total = [], [], []
    rated = [(k, br) for k, br in enumerate(case.network.branches) if br.in_service and br.s_rating > 0]
    idx = case.network.bus_index
    for hour in hours:
        base = {key: float(prof[hour]) for key, prof in case.node_ev.items()}
        ev = {key: base.get(key, 0.0) + carry.get(key, 0.0) for key in sorted(set(base) | set(carry))}
        demanded.append(math.fsum(base.values()))
        net = case.hour_network(hour)
        presented = math.fsum(ev[k] for k in sorted(ev))
        try:
            fl = case.hour_feeders(hour, ev)
            res = _converge_with_fallback(hour, net, fl, opts, opf_options, volts, warm)
            actions = []
            carry = {}
            shed = 0.0
            if opts.controller:
                bus_ev = case.ev_by_bus(ev)
                lmp = {b: res.opf.lmp[idx[b]] for b in bus_ev}
                outcome = apply_mc_controller(bus_ev, lmp, hour, mc_rules)
                if outcome.actions:
                    actions = outcome.actions
                    mult = {a.bus: a.multiplier for a in actions}
                    delay = {a.bus for a in actions if a.action == "delay"}
                    new_ev = {}
                    for key, kw in ev.items():
                        bus = case._by_id[key[0]].head_bus
                        if bus in mult:
                            kept = kw * mult[bus]
                            new_ev[key] = kept
                            if bus in delay:
                                carry[key] = kw - kept
                            else:
                                shed += kw - kept
                        else:
                            new_ev[key] = kw
                    ev = new_ev
                    fl = case.hour_feeders(hour, ev)
                    res = _converge_with_fallback(hour, net, fl, opts, opf_options,
                                                  {r.bus: (r.v_mag, r.v_ang) for r in res.boundary}, res.opf)
        except (NonConvergenceError, SolverError) as exc:
            raise DayAbort(f"co-simulation aborted at hour {hour}: {exc}", results) from exc
        res.actions = actions
        res.ev_demand_kw = presented
        res.ev_served_kw = math.fsum(ev[k] for k in sorted(ev))
        res.ev_shed_kw = shed
        res.ev_carry_out_kw = math.fsum(carry[k] for k in sorted(carry))
        served.append(res.ev_served_kw)
        shed_total.append(shed)

        loading = res.opf.loading(net)
        t_over = []
        for k, br in rated:
            ratio = float(loading[k])
            normal = classify_loading(ratio, 1.0, season, 0.0, rating_rules) == NORMAL
            over_hours[k] = 0 if normal else over_hours.get(k, 0) + 1
            if ratio > 1.0:
                cls = classify_loading(ratio, 1.0, season, float(over_hours[k]), rating_rules)
                t_over.append((k, ratio, cls))
        res.transmission_overloads = t_over
        hf = {f.id: f for f in fl}
        res.distribution_overloads = [(fid, ov) for fid in sorted(res.feeder_solutions)
                                      for ov in feeder_overloads(res.feeder_solutions[fid], hf[fid])]
        results.append(res)
        volts = {r.bus: (r.v_mag, r.v_ang) for r in res.boundary}
        warm = res.opf
    return DayResult(hours=results, demanded_kwh=math.fsum(demanded), served_kwh=math.fsum(served),
                     shed_kwh=math.fsum(shed_total))
