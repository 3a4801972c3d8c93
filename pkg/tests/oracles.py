"""Independent reference computations and small hand-built cases for the tests.

Nothing here calls the solver under test; each oracle is a brute-force or
closed-form evaluation written directly from the defining equations.  The
OPF dispatch grid is the one exception that leans on the AC power flow,
which is checked against its own oracles first.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import minimize_scalar

from tdcosim.feeder import Feeder, FeederNode, PhaseLoad, Segment
from tdcosim.grid import Branch, Bus, Generator, LoadPoint, Network, Shunt
from tdcosim.powerflow import branch_flow, solve_acpf


# ---------------------------------------------------------------- scalar root finding

def bisect(f, lo: float, hi: float, tol: float = 1e-14, max_iter: int = 200) -> float:
    flo = f(lo)
    if flo * f(hi) > 0:
        raise ValueError("root not bracketed")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def two_bus_oracle(x: float, p_load: float, q_load: float, v1: float = 1.0) -> tuple[float, float]:
    """(|V2|, theta2) of a lossless line x from a slack at v1∠0 feeding a PQ load (pu).

    Real balance at bus 2 gives ``sin(theta) = -p x / (v1 v2)``; the reactive
    balance then is a scalar equation in ``v2`` solved on the high-voltage branch.
    """
    def cos_theta(v2):
        s = p_load * x / (v1 * v2)
        return math.sqrt(1.0 - s * s)

    def f(v2):
        return v2 * v2 / x - v1 * v2 * cos_theta(v2) / x + q_load

    v_nose = math.sqrt(p_load * x) / v1 * 1.0001
    v2 = bisect(f, max(v_nose, 0.5 * v1), 1.2 * v1)
    theta = -math.asin(p_load * x / (v1 * v2))
    return v2, theta


def balance_scalar(network: Network, v_mag, v_ang) -> tuple[np.ndarray, np.ndarray]:
    """Real and reactive injections (pu) by element-wise admittance accumulation.

    Builds G and B from the branch list with plain Python scalars rather than
    the package's sparse assembly.
    """
    ids = [b.id for b in network.buses]
    n = len(ids)
    pos = {b: i for i, b in enumerate(ids)}
    Y = [[0j] * n for _ in range(n)]
    for br in network.branches:
        if not br.in_service:
            continue
        y = 1.0 / complex(br.r, br.x)
        t = br.tap or 1.0
        i, k = pos[br.from_bus], pos[br.to_bus]
        Y[i][i] += (y + 0.5j * br.b_shunt) / (t * t)
        Y[k][k] += y + 0.5j * br.b_shunt
        Y[i][k] -= y / t
        Y[k][i] -= y / t
    for sh in network.shunts:
        Y[pos[sh.bus]][pos[sh.bus]] += complex(sh.g, sh.b) / network.base_mva
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(n):
        for k in range(n):
            g, b = Y[i][k].real, Y[i][k].imag
            th = v_ang[i] - v_ang[k]
            p[i] += v_mag[i] * v_mag[k] * (g * math.cos(th) + b * math.sin(th))
            q[i] += v_mag[i] * v_mag[k] * (g * math.sin(th) - b * math.cos(th))
    return p, q


# ---------------------------------------------------------------- LP vertex enumeration

def lp_vertex_oracle(c, A, senses, rhs, lb, ub, tol: float = 1e-9):
    """Minimum of a small bounded LP by enumerating every basic solution.

    Returns ``(objective, x)`` or ``(None, None)`` when no vertex is feasible.
    """
    c = np.asarray(c, float)
    A = np.atleast_2d(np.asarray(A, float))
    n = c.size
    planes = [(A[i], rhs[i]) for i in range(A.shape[0])]
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        planes.append((e, lb[j]))
        if np.isfinite(ub[j]):
            planes.append((e, ub[j]))
    best, arg = None, None
    for combo in itertools.combinations(range(len(planes)), n):
        M = np.array([planes[k][0] for k in combo])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, np.array([planes[k][1] for k in combo]))
        if np.any(x < lb - tol) or np.any(x > ub + tol):
            continue
        ok = True
        for i, s in enumerate(senses):
            ax = A[i] @ x
            if (s == "<" and ax > rhs[i] + tol) or (s == ">" and ax < rhs[i] - tol) or \
                    (s == "=" and abs(ax - rhs[i]) > tol):
                ok = False
                break
        if ok:
            val = float(c @ x)
            if best is None or val < best - 1e-12:
                best, arg = val, x
    return best, arg


# ---------------------------------------------------------------- small networks

def two_bus(p_mw: float = 100.0, q_mvar: float = 0.0, x: float = 0.1, r: float = 0.0) -> Network:
    return Network(
        buses=(Bus(1, 138.0, "slack"), Bus(2, 138.0, "pq")),
        branches=(Branch(1, 2, r, x, s_rating=500.0),),
        generators=(Generator(1, 0.0, 500.0, -500.0, 500.0, 0.0, 20.0, 0.01),),
        loads=(LoadPoint(2, p_mw, q_mvar),),
    )


def five_bus() -> Network:
    """Meshed 5-bus case with line charging, a transformer tap and a bus shunt."""
    buses = (
        Bus(1, 138.0, "slack", v_mag=1.04),
        Bus(2, 138.0, "pv", v_mag=1.02),
        Bus(3, 138.0, "pq"),
        Bus(4, 138.0, "pq"),
        Bus(5, 69.0, "pq", is_boundary=True),
    )
    branches = (
        Branch(1, 2, 0.02, 0.06, 0.03, s_rating=250.0),
        Branch(1, 3, 0.08, 0.24, 0.025, s_rating=150.0),
        Branch(2, 3, 0.06, 0.18, 0.02, s_rating=150.0),
        Branch(2, 4, 0.06, 0.18, 0.02, s_rating=150.0),
        Branch(3, 4, 0.01, 0.03, 0.01, s_rating=150.0),
        Branch(4, 5, 0.0, 0.08, 0.0, tap=0.98, s_rating=150.0),
    )
    gens = (
        Generator(1, 10.0, 250.0, -100.0, 150.0, 100.0, 20.0, 0.04, p_out=120.0),
        Generator(2, 10.0, 150.0, -80.0, 100.0, 100.0, 25.0, 0.05, p_out=60.0),
        Generator(3, 0.0, 60.0, -30.0, 40.0, 50.0, 40.0, 0.10, p_out=0.0),
    )
    loads = (LoadPoint(2, 20.0, 10.0), LoadPoint(3, 45.0, 15.0), LoadPoint(4, 60.0, 10.0),
             LoadPoint(5, 50.0, 12.0, p_ev=5.0))
    return Network(buses=buses, branches=branches, generators=gens, loads=loads, shunts=(Shunt(3, 0.0, 10.0),))


def three_bus_triangle() -> Network:
    return Network(
        buses=(Bus(1, 138.0, "slack"), Bus(2, 138.0, "pq"), Bus(3, 138.0, "pq")),
        branches=(Branch(1, 2, 0.01, 0.1, 0.02), Branch(2, 3, 0.02, 0.08, 0.01), Branch(1, 3, 0.03, 0.12, 0.04)),
        generators=(Generator(1, 0.0, 300.0),),
        loads=(LoadPoint(2, 40.0, 10.0), LoadPoint(3, 30.0, 12.0)),
    )


# ---------------------------------------------------------------- feeders

def _zrow(rng, length_km: float, phases: str):
    """Six unique entries of a symmetric phase impedance (ohms), zero on absent phases."""
    self_z = complex(0.3, 0.6) * length_km
    mut = complex(0.1, 0.25) * length_km
    full = {"aa": self_z, "ab": mut, "ac": mut, "bb": self_z, "bc": mut, "cc": self_z}
    for key in full:
        if any(p.upper() not in phases for p in key):
            full[key] = 0j
    scale = 1.0 + 0.2 * rng.random()
    return tuple(v * scale for v in (full["aa"], full["ab"], full["ac"], full["bb"], full["bc"], full["cc"]))


def random_feeder(rng, n_nodes: int, kw_scale: float = 30.0, single_phase_share: float = 0.3,
                  base_kv: float = 12.47, fid: int = 1) -> Feeder:
    """Random radial feeder: three-phase trunk with some single-phase laterals."""
    nodes = [FeederNode(0, "ABC")]
    segs = []
    loads = []
    for i in range(1, n_nodes):
        parent = int(rng.integers(0, i))
        pp = nodes[parent].phases
        if len(pp) == 3 and rng.random() < single_phase_share:
            phases = "ABC"[int(rng.integers(0, 3))]
        else:
            phases = pp
        nodes.append(FeederNode(i, phases))
        segs.append(Segment(parent, i, _zrow(rng, 0.05 + 0.2 * rng.random(), phases), rating_a=400.0))
        for ph in phases:
            if rng.random() < 0.6:
                loads.append(PhaseLoad(i, ph, kw_scale * rng.random(), kw_scale * 0.3 * rng.random()))
    return Feeder(id=fid, head_bus=1, head_node=0, base_kv=base_kv, nodes=tuple(nodes), segments=tuple(segs),
                  loads=tuple(loads))


def line_feeder(n: int, z_self: complex = complex(0.05, 0.1), kw: float = 50.0, phases: str = "ABC") -> Feeder:
    """Unbranched uniform feeder with identical balanced loads at every node."""
    nodes = tuple(FeederNode(i, phases) for i in range(n))
    z = (z_self, 0j, 0j, z_self, 0j, z_self)
    segs = tuple(Segment(i, i + 1, z) for i in range(n - 1))
    loads = tuple(PhaseLoad(i, ph, kw, 0.2 * kw) for i in range(1, n) for ph in phases)
    return Feeder(id=1, head_bus=1, head_node=0, base_kv=12.47, nodes=nodes, segments=segs, loads=loads)


def nearest_seed_bruteforce(points: np.ndarray, seeds: np.ndarray, ids: list[int]) -> list[int]:
    """Linear-scan nearest seed per point with lowest-id tie-breaking."""
    out = []
    order = np.argsort(ids, kind="stable")
    for p in points:
        best, best_d = None, math.inf
        for k in order:
            d = (p[0] - seeds[k][0]) ** 2 + (p[1] - seeds[k][1]) ** 2
            if d < best_d:
                best, best_d = ids[k], d
        out.append(best)
    return out


# ---------------------------------------------------------------- OPF cases

def single_bus(load=100.0):
    return Network(buses=(Bus(1, 69.0, "slack"),),
                   generators=(Generator(1, 0.0, 300.0, -100.0, 100.0, 0.0, 20.0, 0.01),),
                   loads=(LoadPoint(1, load, 0.0),))


def congested_pair():
    return Network(
        buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0, "pv")),
        branches=(Branch(1, 2, 0.0, 0.05, s_rating=50.0),),
        generators=(Generator(1, 0.0, 200.0, -100.0, 100.0, 0.0, 10.0, 0.0),
                    Generator(2, 0.0, 200.0, -100.0, 100.0, 0.0, 50.0, 0.0)),
        loads=(LoadPoint(2, 80.0, 0.0),),
    )


def dispatch_grid_oracle(net: Network, step: float = 1.0):
    """Cheapest 1 MW dispatch of the remote unit with the line within rating.

    Each candidate fixes the remote unit's output; the remote voltage setpoint
    is chosen to minimise the line's MVA (bounded scalar search), and the AC
    power flow gives the slack unit's output and the line flow.
    """
    best = None
    g1, g2 = net.generators
    br = net.branches[0]

    def solve(p2, v2):
        trial = net.with_dispatch([0.0, p2]).with_voltages([1.0, v2])
        sol = solve_acpf(trial)
        return sol.p_inj[0], branch_flow(sol, br, net)[2]

    for p2 in np.arange(g2.p_min, g2.p_max + step / 2, step):
        res = minimize_scalar(lambda v: solve(p2, v)[1], bounds=(0.95, 1.05), method="bounded",
                              options={"xatol": 1e-10})
        p1, s = solve(p2, res.x)
        if not (g1.p_min <= p1 <= g1.p_max) or s > br.s_rating * (1 + 1e-6):
            continue
        cost = g1.cost(p1) + g2.cost(p2)
        if best is None or cost < best[0]:
            best = (cost, p1, p2)
    return best
