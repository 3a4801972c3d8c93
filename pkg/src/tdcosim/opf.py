"""AC optimal power flow by successive linear programming.

Each iteration linearizes the AC balance equations and from-side branch MVA
flows around the latest AC power flow solution, solves an LP with the
quadratic generator costs piecewise-linearized over a trust-region window,
applies the LP dispatch and voltage setpoints, and re-solves the AC power
flow.  Voltage limits, branch MVA limits and the bus power balances carry
penalized slack variables, so an over-constrained case still returns an AC
solution with a non-zero ``penalty_total``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from tdcosim.errors import ConfigError, ModelError, NumericalError, SolverError
from tdcosim.grid import Network, branch_admittances, build_admittance
from tdcosim.lp import INFEASIBLE, UNBOUNDED, LpProblem, solve_lp
from tdcosim.powerflow import (
    PowerFlowSolution,
    all_branch_flows,
    generator_outputs,
    injections,
    power_derivatives,
    solve_acpf,
)

logger = logging.getLogger(__name__)


@dataclass
class OpfOptions:
    max_iterations: int = 30
    dispatch_tol_mw: float = 0.1
    voltage_tol: float = 1e-4
    trust_fraction: float = 0.2  # of each generator's real-power range
    voltage_step: float = 0.05  # pu per iteration
    angle_step: float = 0.5  # rad per iteration
    segments: int = 10
    soft_limits: bool = True
    branch_penalty: float = 1000.0  # $/MVA-h
    voltage_penalty: float = 10000.0  # $/pu-h
    unserved_penalty: float = 10000.0  # $/MWh (and $/MVAr-h)
    acpf_tol: float = 1e-8
    acpf_max_iter: int = 20
    lp_method: str = "simplex"
    tie_break: float = 1e-6  # $/MWh per generator index
    voltage_move_cost: float = 1.0  # $/pu-h, damps degenerate voltage moves
    monitor_fraction: float = 0.5  # branches loaded above this share of rating get cuts
    merit_tol: float = 1e-10  # stop once the LP predicts less relative improvement than this
    refine_mw: float = 0.01  # cost segments are narrowed to this width before stopping

    @classmethod
    def from_dict(cls, data: dict | None) -> OpfOptions:
        data = dict(data or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown OPF options {sorted(unknown)}")
        return cls(**data)


@dataclass
class OpfSolution:
    bus_ids: tuple[int, ...]
    dispatch_p: np.ndarray  # MW per generator
    dispatch_q: np.ndarray  # MVAr per generator
    objective: float  # $/h generation cost
    lmp: np.ndarray  # $/MWh per bus
    branch_flows: np.ndarray  # (n_branch, 3) from-side P, Q, S
    penalty_total: float  # $/h
    slp_iterations: int
    converged: bool
    pf: PowerFlowSolution
    unserved_p: np.ndarray  # MW per bus, positive = load not served
    unserved_q: np.ndarray
    voltage_violation: np.ndarray  # pu per bus
    branch_overload: np.ndarray  # MVA per branch
    network: Network  # solved snapshot (dispatch, setpoints, curtailment applied)
    trace: list[float] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return self.objective + self.penalty_total

    def lmp_at(self, bus_id: int) -> float:
        return float(self.lmp[self.bus_ids.index(bus_id)])

    def loading(self, network: Network) -> np.ndarray:
        """From-side MVA flow over nameplate rating; NaN for unrated branches."""
        rating = np.array([br.s_rating for br in network.branches], dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(rating > 0, self.branch_flows[:, 2] / rating, np.nan)


@dataclass
class _Point:
    p: np.ndarray
    q: np.ndarray
    vset: np.ndarray
    u_p: np.ndarray
    u_q: np.ndarray
    pf: PowerFlowSolution
    net: Network
    flows: np.ndarray
    cost: float
    penalty: float
    merit: float
    v_viol: np.ndarray
    overload: np.ndarray


# angular offsets (rad) of the MVA tangent cuts around the operating direction,
# dense near zero so the polygon hugs the rating circle where the flow sits
_CUT_OFFSETS = np.array([-np.pi / 3, -np.pi / 6, -np.pi / 16, -np.pi / 64, 0.0,
                         np.pi / 64, np.pi / 16, np.pi / 6, np.pi / 3])


def merit_order_dispatch(network: Network, demand_mw: float, segments: int = 10) -> np.ndarray:
    """Lossless economic dispatch by filling piecewise cost segments cheapest first."""
    p = np.array([g.p_min if g.in_service else 0.0 for g in network.generators])
    pieces = []
    for k, g in network.active_generators():
        width = (g.p_max - g.p_min) / segments
        for s in range(segments):
            x1 = g.p_min + s * width
            pieces.append((g.cost_b + g.cost_c * (2 * x1 + width), k, width))
    pieces.sort(key=lambda t: (t[0], t[1]))
    need = demand_mw - p.sum()
    for _, k, width in pieces:
        if need <= 0:
            break
        take = min(width, need)
        p[k] += take
        need -= take
    return p


class _Slp:
    def __init__(self, network: Network, opts: OpfOptions):
        self.net0 = network
        self.opts = opts
        self.base = network.base_mva
        self.ybus = build_admittance(network)
        self.nb = network.n_bus
        self.gens = network.active_generators()
        if not self.gens:
            raise ModelError("OPF needs at least one in-service generator")
        for k, g in self.gens:
            if g.cost_c < 0:
                raise ModelError(f"generator {k} has non-convex cost")
        self.gen_bus = np.array([network.bus_index[g.bus] for _, g in self.gens])
        self.kinds = np.array([b.kind for b in network.buses])
        self.ref = network.slack_index
        self.pd, self.qd = network.bus_demand()
        self.vmin = np.array([b.v_min for b in network.buses])
        self.vmax = np.array([b.v_max for b in network.buses])
        self.rated = [k for k, br in enumerate(network.branches) if br.in_service and br.s_rating > 0]
        self.rating = np.array([br.s_rating for br in network.branches], dtype=float)

    # ---------------------------------------------------------------- evaluate
    def evaluate(self, p, q, vset, u_p, u_q, start: PowerFlowSolution | None) -> _Point:
        net = self.net0
        p = p.copy()
        u_p = u_p.copy()
        vm = np.array([b.v_mag for b in net.buses])
        hold = np.isin(self.kinds, ("slack", "pv"))
        vm[hold] = vset[hold]
        base_net = net.with_dispatch(p, q).with_voltages(vm)
        slack_gens = [k for k, g in self.gens if net.bus_index[g.bus] == self.ref]
        pf = start
        for _ in range(6):
            adj = {net.buses[i].id: (-u_p[i], -u_q[i]) for i in range(self.nb)
                   if u_p[i] != 0.0 or u_q[i] != 0.0}
            snap = base_net.with_added_loads(adj) if adj else base_net
            pf = solve_acpf(snap, start=pf, tol=self.opts.acpf_tol, max_iter=self.opts.acpf_max_iter,
                            enforce_q_limits=True, ybus=self.ybus)
            p_act, q_act = generator_outputs(snap, pf)
            if not slack_gens or not self.opts.soft_limits:
                break
            k = slack_gens[0]
            g = net.generators[k]
            if p_act[k] > g.p_max + 1e-7:
                excess = p_act[k] - g.p_max
                # hand the slack's excess to the cheapest units with headroom
                moved = False
                for j, gj in sorted(((j, gj) for j, gj in self.gens if j != k),
                                    key=lambda t: t[1].marginal_cost(p[t[0]])):
                    room = gj.p_max - p[j]
                    if room <= 1e-9:
                        continue
                    take = min(room, excess)
                    p[j] += take
                    excess -= take
                    moved = True
                    if excess <= 1e-9:
                        break
                if moved:
                    base_net = net.with_dispatch(p, q).with_voltages(vm)
                    if excess <= 1e-9:
                        continue
                # then curtail load where the LP already curtails, else the largest load
                order = np.lexsort((-(self.pd - u_p), -u_p))
                for i in order:
                    room = self.pd[i] - u_p[i]
                    if room <= 0:
                        continue
                    take = min(room, excess)
                    u_p[i] += take
                    excess -= take
                    if excess <= 0:
                        break
                if excess > 1e-9:
                    break
            elif p_act[k] < g.p_min - 1e-7:
                u_p[self.ref] -= g.p_min - p_act[k]
            else:
                break
        flows = all_branch_flows(snap, pf)
        v_viol = np.maximum(pf.v_mag - self.vmax, 0) + np.maximum(self.vmin - pf.v_mag, 0)
        overload = np.zeros(len(net.branches))
        if self.rated:
            r = np.array(self.rated)
            overload[r] = np.maximum(flows[r, 2] - self.rating[r], 0.0)
        # round-off below these levels is not a violation
        v_viol[v_viol < 1e-9] = 0.0
        overload[overload < 1e-7] = 0.0
        u_p[np.abs(u_p) < 1e-7] = 0.0
        u_q = np.where(np.abs(u_q) < 1e-7, 0.0, u_q)
        cost = float(sum(net.generators[k].cost(p_act[k]) for k, _ in self.gens))
        o = self.opts
        penalty = (o.voltage_penalty * float(v_viol.sum())
                   + o.branch_penalty * float(overload.sum())
                   + o.unserved_penalty * float(np.abs(u_p).sum() + np.abs(u_q).sum()))
        bound_viol = sum(max(p_act[k] - g.p_max, g.p_min - p_act[k], 0.0) for k, g in self.gens)
        merit = cost + penalty + 1e6 * bound_viol
        dispatched = snap.with_dispatch(p_act, q_act)
        return _Point(p=p_act, q=q_act, vset=pf.v_mag.copy(), u_p=u_p, u_q=u_q.copy(), pf=pf, net=dispatched,
                      flows=flows, cost=cost, penalty=penalty, merit=merit, v_viol=v_viol, overload=overload)

    # ---------------------------------------------------------------- LP
    def windows(self, pt: _Point, delta_g: np.ndarray) -> list[np.ndarray]:
        """Segment breakpoints (MW) spanning each generator's trust window."""
        out = []
        for j, (k, g) in enumerate(self.gens):
            lo = min(max(pt.p[k] - delta_g[j], g.p_min), g.p_max)
            hi = min(max(pt.p[k] + delta_g[j], g.p_min), g.p_max)
            out.append(np.linspace(lo, hi, self.opts.segments + 1))
        return out

    def pricing_breakpoints(self, pt: _Point) -> list[np.ndarray]:
        """Full-range breakpoints with a narrow piece centred on the dispatch.

        The centre piece's secant slope equals the tangent marginal cost at
        the operating point, so bus-balance duals read off this LP are the
        locational prices rather than artefacts of the trust region.
        """
        out = []
        eta = max(self.opts.dispatch_tol_mw, 1e-6)
        for k, g in self.gens:
            pts = [g.p_min, pt.p[k] - eta, pt.p[k] + eta, g.p_max]
            pts = np.clip(pts, g.p_min, g.p_max)
            out.append(np.unique(pts))
        return out

    def build_lp(self, pt: _Point, breakpoints: list[np.ndarray], dv: float, dth: float):
        o = self.opts
        nb, base = self.nb, self.base
        ng = len(self.gens)
        soft = o.soft_limits
        rated = self.rated if pt.flows.size else []
        rated = [k for k in rated if pt.flows[k, 2] >= o.monitor_fraction * self.rating[k]]
        nl = len(rated)
        nseg = [max(len(bp) - 1, 1) for bp in breakpoints]
        seg_off = np.concatenate([[0], np.cumsum(nseg)])

        # variable layout
        names = ["th", "vm", "dv_up", "dv_dn", "pg", "seg", "qg"]
        sizes = [nb, nb, nb, nb, ng, int(seg_off[-1]), ng]
        if soft:
            names += ["sp_up", "sp_dn", "sq_up", "sq_dn", "sv_up", "sv_dn", "ss"]
            sizes += [nb, nb, nb, nb, nb, nb, nl]
        offs = dict(zip(names, np.cumsum([0] + sizes[:-1])))
        nvar = int(sum(sizes))
        c = np.zeros(nvar)
        lb = np.zeros(nvar)
        ub = np.full(nvar, np.inf)

        va0, vm0 = pt.pf.v_ang, pt.pf.v_mag
        th, vmo = offs["th"], offs["vm"]
        lb[th:th + nb] = va0 - dth
        ub[th:th + nb] = va0 + dth
        lb[th + self.ref] = ub[th + self.ref] = va0[self.ref]
        vlo = np.full(nb, 0.5) if soft else self.vmin
        vhi = np.full(nb, 1.5) if soft else self.vmax
        lb[vmo:vmo + nb] = vlo
        ub[vmo:vmo + nb] = vhi
        for name in ("dv_up", "dv_dn"):
            ub[offs[name]:offs[name] + nb] = dv
            c[offs[name]:offs[name] + nb] = o.voltage_move_cost

        pg, seg, qg = offs["pg"], offs["seg"], offs["qg"]
        const = 0.0
        for j, (k, g) in enumerate(self.gens):
            bp = breakpoints[j] / base
            lo, hi = bp[0], bp[-1]
            lb[pg + j], ub[pg + j] = lo, hi
            sl = slice(seg + seg_off[j], seg + seg_off[j + 1])
            if len(bp) > 1:
                ub[sl] = np.diff(bp)
                c[sl] = base * (g.cost_b + g.cost_c * base * (bp[:-1] + bp[1:])) + o.tie_break * base * j
            else:
                ub[sl] = 0.0
            const += g.cost(lo * base)
            lb[qg + j], ub[qg + j] = g.q_min / base, g.q_max / base

        rows, cols, vals = [], [], []
        rhs, senses = [], []

        def add_row(entries, sense, b):
            r = len(rhs)
            for col, val in entries:
                rows.append(r)
                cols.append(col)
                vals.append(val)
            senses.append(sense)
            rhs.append(b)
            return r

        v0 = pt.pf.voltage
        s0 = injections(v0, self.ybus)
        ds_dva, ds_dvm = power_derivatives(v0, self.ybus.entries)
        ds_dva = ds_dva.toarray()
        ds_dvm = ds_dvm.toarray()
        gens_at = {i: [] for i in range(nb)}
        for j, i in enumerate(self.gen_bus):
            gens_at[int(i)].append(j)

        p_rows = []
        for part, gen_off, dem, up, dn in (("re", pg, self.pd, "sp_up", "sp_dn"),
                                            ("im", qg, self.qd, "sq_up", "sq_dn")):
            dA = ds_dva.real if part == "re" else ds_dva.imag
            dV = ds_dvm.real if part == "re" else ds_dvm.imag
            s_part = s0.real if part == "re" else s0.imag
            for i in range(nb):
                ent = [(gen_off + j, 1.0) for j in gens_at[i]]
                nzA = np.flatnonzero(dA[i])
                nzV = np.flatnonzero(dV[i])
                ent += [(th + m, -dA[i, m]) for m in nzA]
                ent += [(vmo + m, -dV[i, m]) for m in nzV]
                if soft:
                    ent += [(offs[up] + i, 1.0), (offs[dn] + i, -1.0)]
                b = dem[i] / base + s_part[i] - dA[i, nzA] @ va0[nzA] - dV[i, nzV] @ vm0[nzV]
                r = add_row(ent, "=", b)
                if part == "re":
                    p_rows.append(r)

        for j in range(ng):
            ent = [(pg + j, 1.0)] + [(seg + s, -1.0) for s in range(seg_off[j], seg_off[j + 1])]
            add_row(ent, "=", breakpoints[j][0] / base)
        for i in range(nb):
            add_row([(vmo + i, 1.0), (offs["dv_up"] + i, -1.0), (offs["dv_dn"] + i, 1.0)], "=", vm0[i])

        if soft:
            for i in range(nb):
                add_row([(vmo + i, 1.0), (offs["sv_up"] + i, -1.0)], "<", self.vmax[i])
                add_row([(vmo + i, 1.0), (offs["sv_dn"] + i, 1.0)], ">", self.vmin[i])
            price = o.unserved_penalty * base
            c[offs["sp_up"]:offs["sp_up"] + nb] = price
            c[offs["sp_dn"]:offs["sp_dn"] + nb] = price
            c[offs["sq_up"]:offs["sq_up"] + nb] = price
            c[offs["sq_dn"]:offs["sq_dn"] + nb] = price
            ub[offs["sp_up"]:offs["sp_up"] + nb] = np.maximum(self.pd, 0.0) / base
            c[offs["sv_up"]:offs["sv_up"] + nb] = o.voltage_penalty
            c[offs["sv_dn"]:offs["sv_dn"] + nb] = o.voltage_penalty
            c[offs["ss"]:offs["ss"] + nl] = o.branch_penalty * base

        net = self.net0
        for li, k in enumerate(rated):
            br = net.branches[k]
            f, t = net.bus_index[br.from_bus], net.bus_index[br.to_bus]
            yff, yft, _, _ = branch_admittances(br)
            vf, vt = v0[f], v0[t]
            sf = vf * np.conj(yff * vf + yft * vt)
            cross = vf * np.conj(yft) * np.conj(vt)
            dsf = {
                th + f: 1j * cross,
                th + t: -1j * cross,
                vmo + f: 2 * abs(vf) * np.conj(yff) + np.exp(1j * np.angle(vf)) * np.conj(yft) * np.conj(vt),
                vmo + t: vf * np.conj(yft) * np.exp(-1j * np.angle(vt)),
            }
            x0 = {th + f: va0[f], th + t: va0[t], vmo + f: vm0[f], vmo + t: vm0[t]}
            # polygonal outer approximation of the MVA circle, densest around
            # the current operating direction (the centre cut is the tangent)
            phi0 = np.angle(sf)
            for off in _CUT_OFFSETS:
                w = np.exp(1j * (phi0 + off))
                grad = {col: float((np.conj(w) * d).real) for col, d in dsf.items()}
                s_dir = float((np.conj(w) * sf).real)
                b = self.rating[k] / base - s_dir + sum(grad[col] * x0[col] for col in grad)
                ent = list(grad.items())
                if soft:
                    ent.append((offs["ss"] + li, -1.0))
                add_row(ent, "<", b)

        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), nvar))
        problem = LpProblem(costs=c, rows=A, senses=senses, rhs=np.array(rhs), lb=lb, ub=ub)
        return problem, offs, np.array(p_rows), const

    def step(self, pt: _Point, breakpoints, dv, dth):
        problem, offs, p_rows, const = self.build_lp(pt, breakpoints, dv, dth)
        res = solve_lp(problem, method=self.opts.lp_method)
        if res.status == INFEASIBLE:
            raise SolverError("OPF linear subproblem is infeasible (soft limits disabled)")
        if res.status == UNBOUNDED:
            raise ModelError("OPF linear subproblem is unbounded")
        x = res.x
        nb, base = self.nb, self.base
        # model merit at the LP point, less the proximal and tie-break terms,
        # against the same piecewise model at the current point
        o = self.opts
        extra = o.voltage_move_cost * float(x[offs["dv_up"]:offs["dv_up"] + nb].sum()
                                            + x[offs["dv_dn"]:offs["dv_dn"] + nb].sum())
        model0 = pt.penalty
        for j, (k, g) in enumerate(self.gens):
            bp = breakpoints[j]
            extra += o.tie_break * base * j * (x[offs["pg"] + j] - bp[0] / base)
            model0 += float(np.interp(pt.p[k], bp, [g.cost(v) for v in bp]))
        self.predicted = model0 - (res.objective + const - extra)
        p = np.zeros(len(self.net0.generators))
        q = np.zeros(len(self.net0.generators))
        for j, (k, _) in enumerate(self.gens):
            p[k] = x[offs["pg"] + j] * base
            q[k] = x[offs["qg"] + j] * base
        vset = x[offs["vm"]:offs["vm"] + nb].copy()
        u_p = np.zeros(nb)
        u_q = np.zeros(nb)
        if self.opts.soft_limits:
            u_p = (x[offs["sp_up"]:offs["sp_up"] + nb] - x[offs["sp_dn"]:offs["sp_dn"] + nb]) * base
            u_q = (x[offs["sq_up"]:offs["sq_up"] + nb] - x[offs["sq_dn"]:offs["sq_dn"] + nb]) * base
            u_p[np.abs(u_p) < 1e-9] = 0.0
            u_q[np.abs(u_q) < 1e-9] = 0.0
        lmp = res.duals[p_rows] / base
        return p, q, vset, u_p, u_q, lmp


def solve_acopf(network: Network, options: OpfOptions | None = None,
                start: OpfSolution | None = None) -> OpfSolution:
    """Minimize total quadratic generation cost subject to AC network constraints.

    Raises:
        ModelError: no generator, non-convex cost, or an unbounded LP.
        SolverError: the inner AC power flow diverges at the starting point,
            or (soft limits disabled) the LP is infeasible.
    """
    opts = options or OpfOptions()
    slp = _Slp(network, opts)
    nb = slp.nb

    if start is not None and len(start.dispatch_p) == len(network.generators) and start.pf.v_mag.size == nb:
        p0 = np.array(start.dispatch_p, dtype=float)
        q0 = np.array(start.dispatch_q, dtype=float)
        vset0 = start.pf.v_mag.copy()
        pf0 = start.pf
    else:
        pd, _ = network.bus_demand()
        p0 = merit_order_dispatch(network, float(pd.sum()) * 1.02, opts.segments)
        q0 = np.array([g.q_out for g in network.generators], dtype=float)
        vset0 = np.array([b.v_mag for b in network.buses])
        pf0 = None

    # starting curtailment: none, or the share of demand the fleet cannot cover;
    # deeper cuts only if the power flow has no solution at the start
    pd, _ = network.bus_demand()
    cap = sum(g.p_max for _, g in slp.gens)
    short = max(0.0, 1.0 - cap / pd.sum()) if pd.sum() > 0 else 0.0
    cuts = [0.0] if not opts.soft_limits else sorted({short, 0.5 + 0.5 * short, 0.9})
    pt = None
    err = None
    for frac in cuts:
        u0 = np.maximum(pd, 0.0) * frac
        for warm_pf in ([pf0, None] if pf0 is not None else [None]):
            try:
                pt = slp.evaluate(p0, q0, vset0, u0, np.zeros(nb), warm_pf)
                break
            except NumericalError as exc:
                err = exc
        if pt is not None:
            break
    if pt is None:
        raise SolverError(f"AC power flow fails at the OPF starting point: {err}") from err

    span = np.array([max(g.p_max - g.p_min, 0.0) for _, g in slp.gens])
    delta_max = np.maximum(opts.trust_fraction * span, 1e-3)
    delta_g = delta_max.copy()
    dv = opts.voltage_step
    dth = opts.angle_step
    last_move = np.zeros(len(slp.gens))
    lmp = np.zeros(nb)
    converged = False
    trace = [pt.merit]
    it = 0
    while it < opts.max_iterations:
        it += 1
        p, q, vset, u_p, u_q, lmp_new = slp.step(pt, slp.windows(pt, delta_g), dv, dth)
        lmp = lmp_new
        pred = slp.predicted
        if pred <= opts.merit_tol * max(1.0, abs(pt.merit)):
            # no gain at this segment width; narrow the windows until the
            # piecewise cost is fine enough to pin the marginal costs
            coarse = 2.0 * delta_g / opts.segments > opts.refine_mw
            if not coarse.any():
                converged = True
                break
            delta_g[coarse] *= 0.1
            continue
        try:
            cand = slp.evaluate(p, q, vset, u_p, u_q, pt.pf)
        except NumericalError:
            delta_g *= 0.5
            dv *= 0.5
            dth *= 0.5
            continue
        rho = (pt.merit - cand.merit) / pred
        if rho < 0.1:
            # shrink below the rejected move, not just below the old radius
            tried = np.array([abs(p[k] - pt.p[k]) for k, _ in slp.gens])
            delta_g = 0.5 * np.maximum(np.minimum(delta_g, tried), 1e-4)
            dv = 0.5 * max(min(dv, float(np.max(np.abs(vset - pt.pf.v_mag)))), 1e-6)
            dth = 0.5 * max(min(dth, float(np.max(np.abs(cand.pf.v_ang - pt.pf.v_ang)))), 1e-5)
            trace.append(cand.merit)
            continue
        move = np.array([cand.p[k] - pt.p[k] for k, _ in slp.gens])
        dvmax = float(np.max(np.abs(cand.pf.v_mag - pt.pf.v_mag)))
        dthmax = float(np.max(np.abs(cand.pf.v_ang - pt.pf.v_ang)))
        reversed_ = (np.sign(move) * np.sign(last_move) < 0) & (np.abs(move) > 1e-9)
        delta_g[reversed_] *= 0.5
        if rho > 0.75:
            at_edge = (np.abs(move) >= 0.9 * delta_g) & ~reversed_
            delta_g[at_edge] = np.minimum(delta_g[at_edge] * 2.0, delta_max[at_edge])
            if dvmax >= 0.9 * dv:
                dv = min(2.0 * dv, opts.voltage_step)
            if dthmax >= 0.9 * dth:
                dth = min(2.0 * dth, opts.angle_step)
        elif rho < 0.25:
            delta_g = np.maximum(0.5 * delta_g, 1e-4)
            dv = max(0.5 * dv, 1e-6)
            dth = max(0.5 * dth, 1e-5)
        last_move = np.where(np.abs(move) > 1e-9, move, last_move)
        pt = cand
        trace.append(pt.merit)
        if np.max(np.abs(move), initial=0.0) < opts.dispatch_tol_mw and dvmax < opts.voltage_tol:
            converged = True
            break

    if not converged:
        logger.info("SLP stopped at iteration cap with merit %.6g", pt.merit)
    # prices from an LP at the final operating point without trust-region windows
    _, _, _, _, _, lmp = slp.step(pt, slp.pricing_breakpoints(pt), dv, dth)

    return OpfSolution(
        bus_ids=tuple(b.id for b in network.buses),
        dispatch_p=pt.p, dispatch_q=pt.q, objective=pt.cost, lmp=lmp,
        branch_flows=pt.flows, penalty_total=pt.penalty, slp_iterations=it,
        converged=converged, pf=pt.pf, unserved_p=pt.u_p, unserved_q=pt.u_q,
        voltage_violation=pt.v_viol, branch_overload=pt.overload, network=pt.net, trace=trace,
    )


def write_solution_csv(sol: OpfSolution, network: Network, bus_path, branch_path) -> None:
    """Dump per-bus (|V|, angle, LMP) and per-branch (P, Q, S, loading %) tables."""
    with open(bus_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "v_mag_pu", "v_ang_rad", "lmp_usd_per_mwh", "unserved_mw"])
        for i, bid in enumerate(sol.bus_ids):
            w.writerow([bid, f"{sol.pf.v_mag[i]:.8f}", f"{sol.pf.v_ang[i]:.8f}",
                        f"{sol.lmp[i]:.6f}", f"{sol.unserved_p[i]:.6f}"])
    loading = sol.loading(network)
    with open(branch_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "from_bus", "to_bus", "p_mw", "q_mvar", "s_mva", "loading_pct"])
        for k, br in enumerate(network.branches):
            pct = "" if np.isnan(loading[k]) else f"{100 * loading[k]:.4f}"
            w.writerow([k, br.from_bus, br.to_bus, f"{sol.branch_flows[k, 0]:.6f}",
                        f"{sol.branch_flows[k, 1]:.6f}", f"{sol.branch_flows[k, 2]:.6f}", pct])



