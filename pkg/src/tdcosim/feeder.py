"""Unbalanced three-phase radial feeders and the forward/backward sweep.

Every quantity in the sweep is referred to the head voltage level through
the cumulative per-phase transformer ratio ``a`` of each node
(``V' = a V``, ``I' = I / a``).  Complex power is invariant under the
referral, so constant-power loads need no conversion, and the feeder becomes
a plain impedance tree::

    I_seg = D @ I_node
    V     = V_head - D.T @ (Z @ I_seg)

where ``D`` is the sparse edge-by-node "is downstream of" matrix and ``Z``
the block-diagonal referred impedance of each edge.

Feeder file format (JSON)::

    {
      "id": 7, "head_bus": 12, "head_node": 0, "base_kv": 12.47,
      "nodes":  [{"id": 0, "phases": "ABC", "location": [lat, lon]}, ...],
      "segments": [{"from_node": 0, "to_node": 1,
                    "z": [[r, x] x 6],        # aa ab ac bb bc cc, ohms
                    "y_shunt": [[g, b] x 3],  # total, siemens
                    "rating_a": 400}, ...],
      "transformers": [{"from_node": 5, "to_node": 6, "ratio": [n, n, n],
                        "z": [[r, x] x 3],    # ohms on the secondary side
                        "rating_kva": 500}, ...],
      "loads": [{"node": 3, "phase": "A", "p_kw": 40, "q_kvar": 12}, ...]
    }
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from tdcosim.errors import InputError, ModelError, NonConvergenceError, StalenessError, TopologyError

PHASES = "ABC"
_SHIFT = np.exp(-2j * np.pi / 3 * np.arange(3))  # A, B, C rotation
_ALPHA = np.exp(2j * np.pi / 3)
_SEQ = np.array([[1, 1, 1], [1, _ALPHA, _ALPHA ** 2], [1, _ALPHA ** 2, _ALPHA]]) / 3.0


@dataclass(frozen=True)
class FeederNode:
    id: int
    phases: str = "ABC"
    location: tuple[float, float] | None = None


@dataclass(frozen=True)
class Segment:
    from_node: int
    to_node: int
    z: tuple[complex, ...]  # aa, ab, ac, bb, bc, cc in ohms (whole length)
    y_shunt: tuple[complex, ...] = (0j, 0j, 0j)  # total per phase, siemens
    rating_a: float = 0.0
    name: str = ""

    def zmatrix(self) -> np.ndarray:
        aa, ab, ac, bb, bc, cc = self.z
        return np.array([[aa, ab, ac], [ab, bb, bc], [ac, bc, cc]], dtype=complex)


@dataclass(frozen=True)
class Transformer:
    from_node: int
    to_node: int
    ratio: tuple[float, float, float]  # primary / secondary voltage per phase
    z: tuple[complex, complex, complex] = (0j, 0j, 0j)  # ohms, secondary side
    rating_kva: float = 0.0
    name: str = ""


@dataclass(frozen=True)
class PhaseLoad:
    node: int
    phase: str
    p_kw: float
    q_kvar: float = 0.0
    kind: str = "base"  # "base" or "ev"


@dataclass(frozen=True)
class Feeder:
    id: int
    head_bus: int
    head_node: int
    base_kv: float  # line-to-line kV at the head
    nodes: tuple[FeederNode, ...]
    segments: tuple[Segment, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    loads: tuple[PhaseLoad, ...] = ()

    def __post_init__(self):
        for attr in ("nodes", "segments", "transformers", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        if self.base_kv <= 0:
            raise ModelError(f"feeder {self.id}: base_kv must be positive")

    @property
    def v_base(self) -> float:
        """Line-to-neutral base voltage at the head, volts."""
        return self.base_kv * 1000.0 / np.sqrt(3.0)

    def total_load(self) -> complex:
        """Sum of all specified loads, kVA."""
        return complex(sum(ld.p_kw for ld in self.loads), sum(ld.q_kvar for ld in self.loads))

    def with_ev_loads(self, triples) -> Feeder:
        """Replace all EV loads with ``(node, phase, kW)`` triples (unity power factor)."""
        base = [ld for ld in self.loads if ld.kind != "ev"]
        ev = []
        for node, phase, kw in triples:
            if kw < 0:
                raise ModelError(f"negative EV load {kw} kW at node {node}")
            if kw:
                ev.append(PhaseLoad(node=node, phase=phase, p_kw=float(kw), kind="ev"))
        return replace(self, loads=tuple(base + ev))

    def scaled(self, factor: float) -> Feeder:
        """All loads multiplied by ``factor``."""
        return replace(self, loads=tuple(replace(ld, p_kw=ld.p_kw * factor, q_kvar=ld.q_kvar * factor)
                                         for ld in self.loads))


@dataclass
class DistSolution:
    feeder_id: int
    node_ids: tuple[int, ...]
    voltages: np.ndarray  # (n_node, 3) complex volts line-to-neutral; 0 on absent phases
    edge_currents: np.ndarray  # (n_edge, 3) complex amps, segments then transformers
    head_current: np.ndarray  # (3,) complex amps
    head_power: np.ndarray  # (3,) complex kVA per phase
    losses: complex  # kW + j kvar (shunt charging counted in the imaginary part)
    converged: bool
    iterations: int
    max_mismatch: float  # pu voltage change of the last sweep
    v_base: float = 1.0
    trace: list[float] = field(default_factory=list)

    @property
    def loss_kw(self) -> float:
        return float(self.losses.real)

    def v_pu(self) -> np.ndarray:
        return np.abs(self.voltages) / self.v_base


@dataclass(frozen=True)
class _Compiled:
    node_ids: tuple[int, ...]
    mask: np.ndarray  # (n, 3) phase present
    a: np.ndarray  # (n, 3) cumulative ratio
    D: sp.csr_matrix  # (3E, 3N)
    DT: sp.csr_matrix
    Z: sp.csr_matrix  # (3E, 3E) referred, block diagonal
    Zb: np.ndarray  # (E, 3, 3) referred blocks
    Y: np.ndarray  # (3N,) referred shunt admittance
    edge_child: np.ndarray  # (E,) node index the edge feeds
    edge_parent: np.ndarray


def _compile(feeder: Feeder) -> _Compiled:
    return _compile_cached(feeder.nodes, feeder.segments, feeder.transformers, feeder.head_node, feeder.id)


@lru_cache(maxsize=512)
def _compile_cached(nodes, segments, transformers, head_node, fid) -> _Compiled:
    index = {}
    for i, nd in enumerate(nodes):
        if nd.id in index:
            raise ModelError(f"feeder {fid}: duplicate node {nd.id}")
        if not nd.phases or set(nd.phases) - set(PHASES):
            raise ModelError(f"feeder {fid}: node {nd.id} has bad phases {nd.phases!r}")
        index[nd.id] = i
    n = len(nodes)
    if head_node not in index:
        raise ModelError(f"feeder {fid}: head node {head_node} is not defined")
    edges = list(segments) + list(transformers)
    parent_edge = {}
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    for e, ed in enumerate(edges):
        for nid in (ed.from_node, ed.to_node):
            if nid not in index:
                raise ModelError(f"feeder {fid}: edge {e} references unknown node {nid}")
        f, t = index[ed.from_node], index[ed.to_node]
        if f == t:
            raise TopologyError(f"feeder {fid}: edge {e} is a self-loop at node {ed.from_node}")
        if t in parent_edge or t == index[head_node]:
            raise TopologyError(f"feeder {fid}: cycle detected, node {ed.to_node} has two feeds")
        parent_edge[t] = e
        children[f].append(t)
    root = index[head_node]
    order = []
    seen = np.zeros(n, dtype=bool)
    queue = deque([root])
    seen[root] = True
    while queue:
        i = queue.popleft()
        order.append(i)
        for c in children[i]:
            if seen[c]:
                raise TopologyError(f"feeder {fid}: cycle detected at node {nodes[c].id}")
            seen[c] = True
            queue.append(c)
    if len(order) != n:
        missing = [nodes[i].id for i in range(n) if not seen[i]][:5]
        raise TopologyError(f"feeder {fid}: nodes not reachable from the head, e.g. {missing}")

    mask = np.array([[p in nd.phases for p in PHASES] for nd in nodes])
    a = np.ones((n, 3))
    ne = len(edges)
    Zb = np.zeros((ne, 3, 3), dtype=complex)
    Y = np.zeros((n, 3), dtype=complex)
    edge_child = np.zeros(ne, dtype=int)
    edge_parent = np.zeros(ne, dtype=int)
    ancestors: dict[int, list[int]] = {root: []}
    n_seg = len(segments)
    for i in order[1:]:
        e = parent_edge[i]
        ed = edges[e]
        p = index[ed.from_node]
        edge_child[e], edge_parent[e] = i, p
        if np.any(mask[i] & ~mask[p]):
            raise TopologyError(f"feeder {fid}: node {nodes[i].id} has a phase its parent lacks")
        m = mask[i].astype(float)
        if e < n_seg:
            a[i] = a[p]
            zm = ed.zmatrix()
            if not np.allclose(zm, zm.T):
                raise ModelError(f"feeder {fid}: segment {e} impedance is not symmetric")
            Zb[e] = (a[i] * m)[:, None] * zm * (a[i] * m)[None, :]
            half = np.asarray(ed.y_shunt, dtype=complex) / 2.0
            Y[i] += half * m / a[i] ** 2
            Y[p] += half * m / a[p] ** 2
        else:
            ratio = np.broadcast_to(np.asarray(ed.ratio, dtype=float), (3,))
            if np.any(ratio[mask[i]] <= 0):
                raise ModelError(f"feeder {fid}: transformer {e - n_seg} has a non-positive ratio")
            a[i] = np.where(mask[i], a[p] * ratio, a[p])
            Zb[e] = np.diag(a[i] ** 2 * np.asarray(ed.z, dtype=complex) * m)
        ancestors[i] = ancestors[p] + [e]

    # D[e, j] = 1 when node j lies downstream of edge e
    rows, cols = [], []
    for j in order[1:]:
        for e in ancestors[j]:
            rows.append(e)
            cols.append(j)
    D1 = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(ne, n))
    D = sp.kron(D1, sp.eye(3), format="csr")
    Z = sp.block_diag(list(Zb), format="csr") if ne else sp.csr_matrix((0, 0), dtype=complex)
    return _Compiled(node_ids=tuple(nd.id for nd in nodes), mask=mask, a=a, D=D, DT=D.T.tocsr(),
                     Z=Z, Zb=Zb, Y=Y.ravel() * mask.ravel(), edge_child=edge_child, edge_parent=edge_parent)


def load_vector(feeder: Feeder, comp: _Compiled | None = None) -> np.ndarray:
    """Per-node, per-phase constant-power load in VA, shape (n_node * 3,)."""
    comp = comp or _compile(feeder)
    index = {nid: i for i, nid in enumerate(comp.node_ids)}
    s = np.zeros((len(comp.node_ids), 3), dtype=complex)
    for ld in feeder.loads:
        if ld.node not in index:
            raise ModelError(f"feeder {feeder.id}: load at unknown node {ld.node}")
        if ld.phase not in PHASES:
            raise ModelError(f"feeder {feeder.id}: load phase {ld.phase!r}")
        i, ph = index[ld.node], PHASES.index(ld.phase)
        if not comp.mask[i, ph]:
            raise ModelError(f"feeder {feeder.id}: load on absent phase {ld.phase} of node {ld.node}")
        s[i, ph] += complex(ld.p_kw, ld.q_kvar) * 1000.0
    return s.ravel()


def balanced_head_voltage(feeder: Feeder, v_mag_pu: float = 1.0, v_ang: float = 0.0) -> np.ndarray:
    """Positive-sequence head phase voltages in volts for a per-unit magnitude and angle."""
    return v_mag_pu * feeder.v_base * np.exp(1j * v_ang) * _SHIFT


def solve_feeder(feeder: Feeder, head_voltage=None, tol: float = 1e-6, max_sweeps: int = 50) -> DistSolution:
    """Forward/backward sweep with constant-power loads.

    ``head_voltage`` is three complex line-to-neutral phase voltages in volts
    (default: balanced nominal).  Convergence is declared when no node phase
    voltage moves by more than ``tol`` per unit between sweeps.

    Raises:
        TopologyError: the segment graph is not a tree rooted at the head.
        NonConvergenceError: ``max_sweeps`` reached.
    """
    comp = _compile(feeder)
    vh = balanced_head_voltage(feeder) if head_voltage is None else np.asarray(head_voltage, dtype=complex)
    if vh.shape != (3,) or np.any(np.abs(vh) <= 0) or not np.all(np.isfinite(vh)):
        raise InputError(f"feeder {feeder.id}: head voltage needs three non-zero phases, got {vh}")
    s_load = load_vector(feeder, comp)
    mask = comp.mask.ravel()
    loaded = s_load != 0
    n = len(comp.node_ids)
    v0 = np.tile(vh, n)
    v = v0.copy()
    vb = feeder.v_base
    trace = []

    def currents(v):
        i = comp.Y * v
        i[loaded] += np.conj(s_load[loaded] / v[loaded])
        return i

    it = 0
    delta = 0.0
    while True:
        it += 1
        i_node = currents(v)
        v_new = v0 - comp.DT @ (comp.Z @ (comp.D @ i_node)) if comp.D.shape[0] else v0.copy()
        v_new[~mask] = v0[~mask]
        delta = float(np.max(np.abs(v_new - v))) / vb if v.size else 0.0
        trace.append(delta)
        if not np.isfinite(delta):
            raise NonConvergenceError(f"feeder {feeder.id}: sweep diverged", delta, it, trace)
        v = v_new
        if delta <= tol:
            break
        if it >= max_sweeps:
            raise NonConvergenceError(f"feeder {feeder.id}: sweep did not converge", delta, it, trace)

    i_node = currents(v)
    i_edge = comp.D @ i_node if comp.D.shape[0] else np.zeros(0, dtype=complex)
    i_head = i_node.reshape(n, 3).sum(axis=0)
    head_va = vh * np.conj(i_head)
    ie = i_edge.reshape(-1, 3)
    series = np.einsum("ei,eij,ej->", np.conj(ie), comp.Zb, ie) if ie.size else 0j
    shunt = np.sum(v * np.conj(comp.Y * v))
    losses = complex(series + shunt) / 1000.0

    a = comp.a
    volts = (v.reshape(n, 3) / a) * comp.mask
    edge_amps = ie * a[comp.edge_child] if ie.size else ie
    return DistSolution(
        feeder_id=feeder.id, node_ids=comp.node_ids, voltages=volts, edge_currents=edge_amps,
        head_current=i_head, head_power=head_va / 1000.0, losses=losses, converged=True,
        iterations=it, max_mismatch=delta, v_base=vb, trace=trace,
    )


@dataclass(frozen=True)
class Overload:
    element: str  # "segment" or "transformer"
    index: int
    name: str
    value: float  # amps (segments) or kVA (transformers)
    rating: float
    ratio: float


def feeder_overloads(solution: DistSolution, feeder: Feeder) -> list[Overload]:
    """Segments whose largest phase current, and transformers whose kVA, exceed rating."""
    out = []
    n_seg = len(feeder.segments)
    for e, seg in enumerate(feeder.segments):
        if seg.rating_a > 0:
            amps = float(np.max(np.abs(solution.edge_currents[e])))
            if amps > seg.rating_a:
                out.append(Overload("segment", e, seg.name, amps, seg.rating_a, amps / seg.rating_a))
    index = {nid: i for i, nid in enumerate(solution.node_ids)}
    for t, tr in enumerate(feeder.transformers):
        if tr.rating_kva > 0:
            v = solution.voltages[index[tr.to_node]]
            kva = float(abs(np.sum(v * np.conj(solution.edge_currents[n_seg + t])))) / 1000.0
            if kva > tr.rating_kva:
                out.append(Overload("transformer", t, tr.name, kva, tr.rating_kva, kva / tr.rating_kva))
    return out


@dataclass(frozen=True)
class BoundaryPower:
    bus: int
    p_mw: float
    q_mvar: float
    unbalance: float  # max(|I0|, |I2|) / |I1| of the summed head currents
    feeders: tuple[int, ...]


def sequence_components(phasors) -> np.ndarray:
    """Zero, positive and negative sequence components of an (A, B, C) set."""
    return _SEQ @ np.asarray(phasors, dtype=complex)


def aggregate_boundary(solutions: dict, substation_map: dict) -> dict[int, BoundaryPower]:
    """Sum three-phase head powers of each substation's feeders into (MW, MVAr).

    ``substation_map`` maps feeder id to boundary bus id; ``solutions`` maps
    feeder id to its :class:`DistSolution` (``None`` when not yet solved).
    Negative- and zero-sequence content is reported as a diagnostic only.

    Raises:
        StalenessError: a mapped feeder has no converged solution.
    """
    by_bus: dict[int, list[int]] = {}
    for fid, bus in substation_map.items():
        by_bus.setdefault(bus, []).append(fid)
    out = {}
    for bus in sorted(by_bus):
        fids = sorted(by_bus[bus])
        s = 0j
        current = np.zeros(3, dtype=complex)
        for fid in fids:
            sol = solutions.get(fid)
            if sol is None or not sol.converged:
                raise StalenessError(f"feeder {fid} at bus {bus} has no converged solution")
            s += complex(np.sum(sol.head_power))
            current += sol.head_current
        seq = sequence_components(current)
        unb = float(max(abs(seq[0]), abs(seq[2])) / abs(seq[1])) if abs(seq[1]) > 0 else 0.0
        out[bus] = BoundaryPower(bus=bus, p_mw=s.real / 1000.0, q_mvar=s.imag / 1000.0,
                                 unbalance=unb, feeders=tuple(fids))
    return out


# ---------------------------------------------------------------- file I/O

def _cx(pair) -> complex:
    if isinstance(pair, (int, float)):
        return complex(pair)
    re, im = pair
    return complex(re, im)


def _pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def feeder_from_dict(data: dict) -> Feeder:
    try:
        nodes = tuple(FeederNode(id=nd["id"], phases=nd.get("phases", "ABC"),
                                 location=tuple(nd["location"]) if nd.get("location") else None)
                      for nd in data["nodes"])
        segs = []
        for s in data.get("segments", []):
            z = tuple(_cx(v) for v in s["z"])
            if len(z) != 6:
                raise ModelError("segment impedance needs 6 entries (aa ab ac bb bc cc)")
            y = tuple(_cx(v) for v in s.get("y_shunt", [0, 0, 0]))
            segs.append(Segment(s["from_node"], s["to_node"], z, y, float(s.get("rating_a", 0.0)),
                                s.get("name", "")))
        trs = []
        for t in data.get("transformers", []):
            ratio = t["ratio"]
            ratio = tuple(float(r) for r in (ratio if isinstance(ratio, list) else [ratio] * 3))
            z = tuple(_cx(v) for v in t.get("z", [0, 0, 0]))
            trs.append(Transformer(t["from_node"], t["to_node"], ratio, z, float(t.get("rating_kva", 0.0)),
                                   t.get("name", "")))
        loads = tuple(PhaseLoad(ld["node"], ld["phase"], float(ld["p_kw"]), float(ld.get("q_kvar", 0.0)),
                                ld.get("kind", "base"))
                      for ld in data.get("loads", []))
        return Feeder(id=data["id"], head_bus=data["head_bus"], head_node=data.get("head_node", nodes[0].id),
                      base_kv=float(data["base_kv"]), nodes=nodes, segments=tuple(segs),
                      transformers=tuple(trs), loads=loads)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"malformed feeder data: {exc!r}") from exc


def feeder_to_dict(feeder: Feeder) -> dict:
    return {
        "id": feeder.id, "head_bus": feeder.head_bus, "head_node": feeder.head_node, "base_kv": feeder.base_kv,
        "nodes": [{"id": nd.id, "phases": nd.phases, "location": list(nd.location) if nd.location else None}
                  for nd in feeder.nodes],
        "segments": [{"from_node": s.from_node, "to_node": s.to_node, "z": [_pair(z) for z in s.z],
                      "y_shunt": [_pair(y) for y in s.y_shunt], "rating_a": s.rating_a, "name": s.name}
                     for s in feeder.segments],
        "transformers": [{"from_node": t.from_node, "to_node": t.to_node, "ratio": list(t.ratio),
                          "z": [_pair(z) for z in t.z], "rating_kva": t.rating_kva, "name": t.name}
                         for t in feeder.transformers],
        "loads": [{"node": ld.node, "phase": ld.phase, "p_kw": ld.p_kw, "q_kvar": ld.q_kvar, "kind": ld.kind}
                  for ld in feeder.loads],
    }


def load_feeder(path) -> Feeder:
    return feeder_from_dict(json.loads(Path(path).read_text()))


def save_feeder(feeder: Feeder, path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=1, sort_keys=True) + "\n")
