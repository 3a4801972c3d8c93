"""Newton-Raphson AC power flow in polar coordinates and branch flows."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from tdcosim.errors import ModelError, NonConvergenceError, NumericalError
from tdcosim.grid import AdmittanceMatrix, Branch, Network, branch_admittances, build_admittance

logger = logging.getLogger(__name__)


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray  # MW, net injection at each bus
    q_inj: np.ndarray  # MVAr
    max_mismatch: float  # pu
    iterations: int
    converged: bool
    base_mva: float = 100.0
    q_limited: list[int] = field(default_factory=list)  # bus ids switched PV -> PQ

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)


def injections(v: np.ndarray, ybus) -> np.ndarray:
    """Complex power injections ``S = V * conj(Y V)`` in per unit."""
    ymat = ybus.entries if isinstance(ybus, AdmittanceMatrix) else ybus
    return v * np.conj(ymat @ v)


def power_derivatives(v: np.ndarray, ybus: sp.csr_matrix):
    """Partial derivatives of bus injections w.r.t. angle and magnitude.

    Returns ``(dS_dVa, dS_dVm)`` as sparse complex matrices.
    """
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(vnorm)
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    return sp.csr_matrix(ds_dva), sp.csr_matrix(ds_dvm)


def specified_injections(network: Network) -> tuple[np.ndarray, np.ndarray]:
    """Scheduled generation minus demand per bus, per unit."""
    idx = network.bus_index
    pg = np.zeros(network.n_bus)
    qg = np.zeros(network.n_bus)
    for g in network.generators:
        if g.in_service:
            pg[idx[g.bus]] += g.p_out
            qg[idx[g.bus]] += g.q_out
    pd, qd = network.bus_demand()
    return (pg - pd) / network.base_mva, (qg - qd) / network.base_mva


def _gen_q_limits(network: Network) -> tuple[np.ndarray, np.ndarray]:
    idx = network.bus_index
    qmin = np.zeros(network.n_bus)
    qmax = np.zeros(network.n_bus)
    for g in network.generators:
        if g.in_service:
            qmin[idx[g.bus]] += g.q_min
            qmax[idx[g.bus]] += g.q_max
    return qmin / network.base_mva, qmax / network.base_mva


def _newton(ybus, v0, p_spec, q_spec, pv, pq, tol, max_iter):
    v = v0.copy()
    va, vm = np.angle(v), np.abs(v)
    pvpq = np.concatenate([pv, pq])
    npvpq, npq = pvpq.size, pq.size

    def mismatch(v):
        s = injections(v, ybus)
        return np.concatenate([s.real[pvpq] - p_spec[pvpq], s.imag[pq] - q_spec[pq]])

    f = mismatch(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        ds_dva, ds_dvm = power_derivatives(v, ybus)
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        jac = sp.bmat([[j11, j12], [j21, j22]], format="csc")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", MatrixRankWarning)
                dx = -spsolve(jac, f)
        except (MatrixRankWarning, RuntimeError) as exc:
            raise NumericalError(f"singular Jacobian at iteration {it}") from exc
        if not np.all(np.isfinite(dx)):
            raise NumericalError(f"singular Jacobian at iteration {it}")
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:npvpq + npq]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if not np.isfinite(norm):
            break
    return v, norm, it


def solve_acpf(
    network: Network,
    start: PowerFlowSolution | None = None,
    tol: float = 1e-8,
    max_iter: int = 20,
    enforce_q_limits: bool = False,
    ybus: AdmittanceMatrix | None = None,
) -> PowerFlowSolution:
    """Solve the AC power balance equations with Newton's method.

    ``start=None`` is a flat start: angle 0 everywhere, magnitude 1.0 at PQ
    buses and the bus setpoint at PV and slack buses.  A previous solution
    warm-starts angles and PQ magnitudes.

    With ``enforce_q_limits`` PV buses whose generators leave their reactive
    range are pinned at the violated limit and re-solved as PQ buses.

    Raises:
        NumericalError: singular Jacobian.
        NonConvergenceError: ``max_iter`` reached; carries the last mismatch.
    """
    if ybus is None:
        ybus = build_admittance(network)
    y = ybus.entries
    kinds = np.array([b.kind for b in network.buses])
    ref = np.flatnonzero(kinds == "slack")
    if ref.size != 1:
        raise ModelError(f"power flow needs exactly one slack bus, found {ref.size}")
    pv = np.flatnonzero(kinds == "pv")
    pq = np.flatnonzero(kinds == "pq")

    vm = np.array([b.v_mag for b in network.buses], dtype=float)
    va = np.zeros(network.n_bus)
    va[ref] = network.buses[ref[0]].v_ang
    if start is not None:
        va = np.array(start.v_ang, dtype=float)
        va[ref] = network.buses[ref[0]].v_ang
        vm[pq] = start.v_mag[pq]
    else:
        vm[pq] = 1.0
    v = vm * np.exp(1j * va)

    p_spec, q_spec = specified_injections(network)
    qmin, qmax = _gen_q_limits(network)
    _, qd = network.bus_demand()
    qd = qd / network.base_mva
    limited: list[int] = []
    total_it = 0
    while True:
        v, norm, it = _newton(y, v, p_spec, q_spec, pv, pq, tol, max_iter)
        total_it += it
        if norm > tol or not np.isfinite(norm):
            raise NonConvergenceError("AC power flow did not converge", norm, total_it)
        if not enforce_q_limits or pv.size == 0:
            break
        qgen = injections(v, y).imag[pv] + qd[pv]
        over = qgen - qmax[pv]
        under = qmin[pv] - qgen
        worst = np.maximum(over, under)
        k = int(np.argmax(worst))
        if worst[k] <= 1e-6:
            break
        bus = pv[k]
        q_spec[bus] = (qmax[bus] if over[k] > under[k] else qmin[bus]) - qd[bus]
        pv = np.delete(pv, k)
        pq = np.sort(np.append(pq, bus))
        limited.append(network.buses[bus].id)

    s = injections(v, y)
    return PowerFlowSolution(
        bus_ids=tuple(b.id for b in network.buses),
        v_mag=np.abs(v), v_ang=np.angle(v),
        p_inj=s.real * network.base_mva, q_inj=s.imag * network.base_mva,
        max_mismatch=norm, iterations=total_it, converged=True,
        base_mva=network.base_mva, q_limited=limited,
    )


def balance_residuals(network: Network, sol: PowerFlowSolution, ybus=None) -> tuple[np.ndarray, np.ndarray]:
    """Real/reactive balance residuals (pu) recomputed from (V, Y).

    Evaluates the scalar cos/sin form of the balance equations directly;
    this deliberately shares no code with the Newton iteration.
    """
    if ybus is None:
        ybus = build_admittance(network)
    Y = ybus.toarray()
    G, B = Y.real, Y.imag
    vm, va = sol.v_mag, sol.v_ang
    n = vm.size
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(n):
        for k in range(n):
            th = va[i] - va[k]
            p[i] += vm[i] * vm[k] * (G[i, k] * np.cos(th) + B[i, k] * np.sin(th))
            q[i] += vm[i] * vm[k] * (G[i, k] * np.sin(th) - B[i, k] * np.cos(th))
    p_spec, q_spec = specified_injections(network)
    return p - p_spec, q - q_spec


def branch_flow(sol: PowerFlowSolution, branch: Branch, network: Network | None = None) -> tuple[float, float, float]:
    """From-side real, reactive and apparent flow (MW, MVAr, MVA) of ``branch``."""
    if network is not None:
        i, k = network.bus_index[branch.from_bus], network.bus_index[branch.to_bus]
    else:
        i, k = sol.index(branch.from_bus), sol.index(branch.to_bus)
    v = sol.voltage
    yff, yft, _, _ = branch_admittances(branch)
    s = v[i] * np.conj(yff * v[i] + yft * v[k]) * sol.base_mva
    return float(s.real), float(s.imag), float(abs(s))


def all_branch_flows(network: Network, sol: PowerFlowSolution) -> np.ndarray:
    """Array of shape (n_branch, 3) with from-side P, Q, S; zero for open branches."""
    out = np.zeros((len(network.branches), 3))
    for k, br in enumerate(network.branches):
        if br.in_service:
            out[k] = branch_flow(sol, br, network)
    return out


def to_side_flow(sol: PowerFlowSolution, branch: Branch, network: Network) -> complex:
    i, k = network.bus_index[branch.from_bus], network.bus_index[branch.to_bus]
    v = sol.voltage
    _, _, ytf, ytt = branch_admittances(branch)
    return complex(v[k] * np.conj(ytf * v[i] + ytt * v[k]) * sol.base_mva)


def generator_outputs(network: Network, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Per-generator (P, Q) in MW / MVAr consistent with a solved power flow.

    The slack bus residual real power goes to the lowest-index in-service
    generator at that bus.  Reactive output at PV and slack buses is shared
    in proportion to each unit's reactive range.
    """
    p = np.array([g.p_out if g.in_service else 0.0 for g in network.generators])
    q = np.array([g.q_out if g.in_service else 0.0 for g in network.generators])
    pd, qd = network.bus_demand()
    idx = network.bus_index
    ref = network.slack_index
    by_bus: dict[int, list[int]] = {}
    for k, g in enumerate(network.generators):
        if g.in_service:
            by_bus.setdefault(idx[g.bus], []).append(k)
    for i, ks in by_bus.items():
        kind = network.buses[i].kind
        if i == ref:
            p_bus = sol.p_inj[i] + pd[i]
            p[ks[0]] = p_bus - sum(p[k] for k in ks[1:])
        if kind in ("slack", "pv"):
            q_bus = sol.q_inj[i] + qd[i]
            span = np.array([max(network.generators[k].q_max - network.generators[k].q_min, 0.0) for k in ks])
            w = span / span.sum() if span.sum() > 0 else np.full(len(ks), 1.0 / len(ks))
            q[ks] = q_bus * w
    return p, q
