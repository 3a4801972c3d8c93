"""Transmission network data model and bus admittance matrix.

All electrical quantities on branches are per unit on the system MVA base.
Generator and load powers are stored in MW / MVAr and converted where the
network equations need per unit.

The on-disk case format is JSON with one table per element type::

    {
      "base_mva": 100.0,
      "buses":      [{"id": 1, "base_kv": 69.0, "kind": "slack", ...}, ...],
      "branches":   [{"from_bus": 1, "to_bus": 2, "r": 0.01, "x": 0.1, ...}, ...],
      "generators": [{"bus": 1, "p_min": 0, "p_max": 200, ...}, ...],
      "loads":      [{"bus": 2, "p_base": 50, "q_base": 10}, ...],
      "shunts":     [{"bus": 2, "g": 0.0, "b": 19.0}, ...]
    }

Column names are exactly the dataclass field names below.  Omitted optional
fields take the dataclass defaults.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from tdcosim.errors import ModelError

BUS_KINDS = ("slack", "pv", "pq")


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    kind: str = "pq"
    v_mag: float = 1.0
    v_ang: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    location: tuple[float, float] | None = None  # (lat, lon) degrees
    is_boundary: bool = False
    area: int = 1

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise ModelError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.location is not None and not isinstance(self.location, tuple):
            object.__setattr__(self, "location", tuple(self.location))


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0
    s_rating: float = 0.0  # MVA nameplate; 0 means unrated
    in_service: bool = True
    name: str = ""


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float = -9999.0
    q_max: float = 9999.0
    cost_a: float = 0.0
    cost_b: float = 0.0
    cost_c: float = 0.0
    p_out: float = 0.0
    q_out: float = 0.0
    in_service: bool = True

    def cost(self, p_mw: float) -> float:
        """Hourly cost in $/h of producing ``p_mw``."""
        return self.cost_a + self.cost_b * p_mw + self.cost_c * p_mw * p_mw

    def marginal_cost(self, p_mw: float) -> float:
        return self.cost_b + 2.0 * self.cost_c * p_mw


@dataclass(frozen=True)
class LoadPoint:
    bus: int
    p_base: float
    q_base: float = 0.0
    p_ev: float = 0.0

    @property
    def p_total(self) -> float:
        return self.p_base + self.p_ev


@dataclass(frozen=True)
class Shunt:
    bus: int
    g: float = 0.0  # MW consumed at 1.0 pu
    b: float = 0.0  # MVAr injected at 1.0 pu


@dataclass(frozen=True)
class Network:
    """Immutable snapshot of a transmission grid.

    Hourly changes (EV load, boundary loads, dispatch) are applied with the
    ``with_*`` helpers, each of which returns a new snapshot.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    generators: tuple[Generator, ...] = ()
    loads: tuple[LoadPoint, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "branches", "generators", "loads", "shunts"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    @property
    def slack_index(self) -> int:
        for i, b in enumerate(self.buses):
            if b.kind == "slack":
                return i
        raise ModelError("network has no slack bus")

    def bus_demand(self) -> tuple[np.ndarray, np.ndarray]:
        """Total real and reactive demand per bus in MW / MVAr."""
        pd = np.zeros(self.n_bus)
        qd = np.zeros(self.n_bus)
        for ld in self.loads:
            i = self.bus_index[ld.bus]
            pd[i] += ld.p_total
            qd[i] += ld.q_base
        return pd, qd

    def active_generators(self) -> list[tuple[int, Generator]]:
        return [(k, g) for k, g in enumerate(self.generators) if g.in_service]

    def with_dispatch(self, p_out, q_out=None) -> Network:
        """Snapshot with generator outputs replaced (MW / MVAr, one per generator)."""
        if q_out is None:
            q_out = [g.q_out for g in self.generators]
        gens = tuple(replace(g, p_out=float(p), q_out=float(q))
                     for g, p, q in zip(self.generators, p_out, q_out))
        return replace(self, generators=gens)

    def with_voltages(self, v_mag, v_ang=None) -> Network:
        if v_ang is None:
            v_ang = [b.v_ang for b in self.buses]
        buses = tuple(replace(b, v_mag=float(vm), v_ang=float(va))
                      for b, vm, va in zip(self.buses, v_mag, v_ang))
        return replace(self, buses=buses)

    def with_ev_load(self, ev_mw: dict[int, float]) -> Network:
        """Snapshot with the EV component of every load set per bus.

        Buses in ``ev_mw`` without a load point get a new zero-base load.
        Buses not in ``ev_mw`` get ``p_ev = 0``.
        """
        for bus_id, p in ev_mw.items():
            if p < 0:
                raise ModelError(f"negative EV load {p} at bus {bus_id}")
        seen = set()
        loads = []
        for ld in self.loads:
            if ld.bus in seen:
                loads.append(replace(ld, p_ev=0.0))
                continue
            seen.add(ld.bus)
            loads.append(replace(ld, p_ev=float(ev_mw.get(ld.bus, 0.0))))
        for bus_id in sorted(set(ev_mw) - seen):
            if bus_id not in self.bus_index:
                raise ModelError(f"EV load at unknown bus {bus_id}")
            loads.append(LoadPoint(bus=bus_id, p_base=0.0, q_base=0.0, p_ev=float(ev_mw[bus_id])))
        return replace(self, loads=tuple(loads))

    def with_added_loads(self, extra: dict[int, tuple[float, float]]) -> Network:
        """Snapshot with extra (P, Q) load points appended, MW / MVAr."""
        loads = list(self.loads)
        for bus_id in sorted(extra):
            if bus_id not in self.bus_index:
                raise ModelError(f"load at unknown bus {bus_id}")
            p, q = extra[bus_id]
            loads.append(LoadPoint(bus=bus_id, p_base=float(p), q_base=float(q)))
        return replace(self, loads=tuple(loads))

    def with_branch_status(self, k: int, in_service: bool) -> Network:
        branches = list(self.branches)
        branches[k] = replace(branches[k], in_service=in_service)
        return replace(self, branches=tuple(branches))


@dataclass
class AdmittanceMatrix:
    """Sparse bus admittance matrix ``G + jB`` in per unit, CSR storage."""

    bus_ids: tuple[int, ...]
    entries: sp.csr_matrix

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def G(self) -> sp.csr_matrix:
        return self.entries.real

    @property
    def B(self) -> sp.csr_matrix:
        return self.entries.imag

    def toarray(self) -> np.ndarray:
        return self.entries.toarray()


def branch_admittances(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Two-port admittances (Yff, Yft, Ytf, Ytt) of a pi-model branch."""
    z = complex(branch.r, branch.x)
    if z == 0:
        raise ModelError(f"zero-impedance branch {branch.from_bus}-{branch.to_bus}")
    y = 1.0 / z
    tap = branch.tap if branch.tap else 1.0
    ych = 0.5j * branch.b_shunt
    ytt = y + ych
    yff = ytt / (tap * tap)
    yft = -y / tap
    return yff, yft, yft, ytt


def build_admittance(network: Network) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix of all in-service branches and shunts."""
    idx = network.bus_index
    n = network.n_bus
    rows: list[int] = []
    cols: list[int] = []
    vals: list[complex] = []
    for br in network.branches:
        if not br.in_service:
            continue
        if br.from_bus not in idx or br.to_bus not in idx:
            raise ModelError(f"branch {br.from_bus}-{br.to_bus} references a missing bus")
        if br.from_bus == br.to_bus:
            raise ModelError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = branch_admittances(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    for sh in network.shunts:
        if sh.bus not in idx:
            raise ModelError(f"shunt references missing bus {sh.bus}")
        i = idx[sh.bus]
        rows.append(i)
        cols.append(i)
        vals.append(complex(sh.g, sh.b) / network.base_mva)
    ybus = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    ybus.sum_duplicates()
    ybus.sort_indices()
    return AdmittanceMatrix(bus_ids=tuple(b.id for b in network.buses), entries=ybus)


# --------------------------------------------------------------------------
# validation


@dataclass
class Issue:
    kind: str  # "island", "slack", "bounds", "reference"
    message: str


@dataclass
class ValidationReport:
    islands: list[list[int]] = field(default_factory=list)
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def by_kind(self, kind: str) -> list[Issue]:
        return [i for i in self.issues if i.kind == kind]


def validate_network(network: Network) -> ValidationReport:
    """Report islands, missing slack buses and bound violations.

    Never raises and never modifies ``network``.
    """
    report = ValidationReport()
    idx = network.bus_index
    n = network.n_bus
    if len(idx) != n:
        report.issues.append(Issue("reference", "duplicate bus ids"))

    for b in network.buses:
        if not b.v_min < b.v_max:
            report.issues.append(Issue("bounds", f"bus {b.id}: v_min {b.v_min} >= v_max {b.v_max}"))
        if not b.base_kv > 0:
            report.issues.append(Issue("bounds", f"bus {b.id}: base_kv {b.base_kv} <= 0"))

    rows, cols = [], []
    for k, br in enumerate(network.branches):
        missing = [bid for bid in (br.from_bus, br.to_bus) if bid not in idx]
        if missing:
            report.issues.append(Issue("reference", f"branch {k} references missing bus {missing[0]}"))
            continue
        if br.from_bus == br.to_bus:
            report.issues.append(Issue("reference", f"branch {k} is a self loop at bus {br.from_bus}"))
        if br.r == 0 and br.x == 0:
            report.issues.append(Issue("bounds", f"branch {k} has zero impedance"))
        if br.s_rating < 0:
            report.issues.append(Issue("bounds", f"branch {k} has negative rating"))
        if br.in_service:
            rows.append(idx[br.from_bus])
            cols.append(idx[br.to_bus])

    for k, g in enumerate(network.generators):
        if g.bus not in idx:
            report.issues.append(Issue("reference", f"generator {k} at missing bus {g.bus}"))
        if g.p_min > g.p_max:
            report.issues.append(Issue("bounds", f"generator {k}: p_min {g.p_min} > p_max {g.p_max}"))
        if g.q_min > g.q_max:
            report.issues.append(Issue("bounds", f"generator {k}: q_min {g.q_min} > q_max {g.q_max}"))
        if g.cost_c < 0:
            report.issues.append(Issue("bounds", f"generator {k}: non-convex cost_c {g.cost_c}"))
    for k, ld in enumerate(network.loads):
        if ld.bus not in idx:
            report.issues.append(Issue("reference", f"load {k} at missing bus {ld.bus}"))
        if ld.p_ev < 0:
            report.issues.append(Issue("bounds", f"load {k}: negative p_ev"))
    for k, sh in enumerate(network.shunts):
        if sh.bus not in idx:
            report.issues.append(Issue("reference", f"shunt {k} at missing bus {sh.bus}"))

    if n:
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(adj, directed=False)
        for c in range(n_comp):
            members = [network.buses[i].id for i in np.flatnonzero(labels == c)]
            report.islands.append(sorted(members))
            n_slack = sum(network.bus(b).kind == "slack" for b in members)
            if n_slack == 0:
                report.issues.append(Issue("island", f"island {sorted(members)} has no slack bus and is unserved"))
            elif n_slack > 1:
                report.issues.append(Issue("slack", f"island {sorted(members)} has {n_slack} slack buses"))
        if n_comp > 1:
            report.issues.append(Issue("island", f"network splits into {n_comp} islands"))
    return report


# --------------------------------------------------------------------------
# case file I/O


def _row(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ModelError(f"{cls.__name__}: unknown columns {sorted(unknown)}")
    return cls(**data)


def network_from_dict(data: dict) -> Network:
    try:
        return Network(
            buses=tuple(_row(Bus, b) for b in data["buses"]),
            branches=tuple(_row(Branch, b) for b in data.get("branches", [])),
            generators=tuple(_row(Generator, g) for g in data.get("generators", [])),
            loads=tuple(_row(LoadPoint, ld) for ld in data.get("loads", [])),
            shunts=tuple(_row(Shunt, s) for s in data.get("shunts", [])),
            base_mva=float(data.get("base_mva", 100.0)),
            name=str(data.get("name", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed case data: {exc}") from exc


def network_to_dict(network: Network) -> dict:
    def rows(items):
        out = []
        for it in items:
            d = asdict(it)
            if "location" in d and d["location"] is not None:
                d["location"] = list(d["location"])
            out.append(d)
        return out

    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": rows(network.buses),
        "branches": rows(network.branches),
        "generators": rows(network.generators),
        "loads": rows(network.loads),
        "shunts": rows(network.shunts),
    }


def load_case(path) -> Network:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".m":
        return from_matpower(text, name=path.stem)
    return network_from_dict(json.loads(text))


def save_case(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(network), indent=1, sort_keys=True) + "\n")


# MATPOWER column mapping (version 2 case format).
#   bus:     BUS_I TYPE PD QD GS BS AREA VM VA BASE_KV ZONE VMAX VMIN
#   gen:     BUS PG QG QMAX QMIN VG MBASE STATUS PMAX PMIN ...
#   branch:  F T R X B RATE_A RATE_B RATE_C TAP SHIFT STATUS ...
#   gencost: MODEL(2) STARTUP SHUTDOWN N c(n-1) ... c0
_MP_KIND = {1: "pq", 2: "pv", 3: "slack"}


def _matpower_matrix(text: str, name: str) -> np.ndarray | None:
    m = re.search(r"mpc\." + name + r"\s*=\s*\[(.*?)\]\s*;", text, re.S)
    if m is None:
        return None
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";").strip()
        if not line:
            continue
        for chunk in line.split(";"):
            vals = chunk.replace(",", " ").split()
            if vals:
                rows.append([float(v) for v in vals])
    return np.array(rows, dtype=float)


def from_matpower(text: str, name: str = "") -> Network:
    """Convert MATPOWER case text into a :class:`Network`.

    Loads (PD, QD) and bus shunts (GS, BS) become separate load and shunt
    rows.  Generator VG overrides the bus voltage setpoint.  Only polynomial
    gencost rows of order <= 2 are accepted; phase shifters are rejected.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text)
    base = float(m.group(1)) if m else 100.0
    bus = _matpower_matrix(text, "bus")
    gen = _matpower_matrix(text, "gen")
    branch = _matpower_matrix(text, "branch")
    gencost = _matpower_matrix(text, "gencost")
    if bus is None or branch is None:
        raise ModelError("MATPOWER text lacks mpc.bus or mpc.branch")

    vg = {}
    if gen is not None:
        for row in gen:
            if row[7] > 0:
                vg[int(row[0])] = row[5]

    buses, loads, shunts = [], [], []
    for row in bus:
        bid, kind = int(row[0]), int(row[1])
        if kind == 4:
            continue
        buses.append(Bus(
            id=bid, kind=_MP_KIND[kind], base_kv=row[9] if row[9] > 0 else 1.0,
            v_mag=vg.get(bid, row[7]), v_ang=np.deg2rad(row[8]),
            v_min=row[12], v_max=row[11], area=int(row[6]),
        ))
        if row[2] or row[3]:
            loads.append(LoadPoint(bus=bid, p_base=row[2], q_base=row[3]))
        if row[4] or row[5]:
            shunts.append(Shunt(bus=bid, g=row[4], b=row[5]))

    branches = []
    for row in branch:
        if len(row) > 9 and row[9] != 0:
            raise ModelError("phase-shifting transformers are not supported")
        branches.append(Branch(
            from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3], b_shunt=row[4],
            s_rating=row[5], tap=row[8] if row[8] else 1.0, in_service=bool(row[10]),
        ))

    generators = []
    if gen is not None:
        for k, row in enumerate(gen):
            a = b = c = 0.0
            if gencost is not None and k < len(gencost):
                cr = gencost[k]
                if int(cr[0]) != 2:
                    raise ModelError("only polynomial gencost rows are supported")
                coeffs = list(cr[4:4 + int(cr[3])])[::-1]  # c0, c1, c2
                if len(coeffs) > 3:
                    raise ModelError("gencost polynomial order > 2")
                coeffs += [0.0] * (3 - len(coeffs))
                a, b, c = coeffs
            generators.append(Generator(
                bus=int(row[0]), p_out=row[1], q_out=row[2], q_max=row[3], q_min=row[4],
                in_service=bool(row[7]), p_max=row[8], p_min=row[9],
                cost_a=a, cost_b=b, cost_c=c,
            ))
    return Network(buses=tuple(buses), branches=tuple(branches), generators=tuple(generators),
                   loads=tuple(loads), shunts=tuple(shunts), base_mva=base, name=name)
