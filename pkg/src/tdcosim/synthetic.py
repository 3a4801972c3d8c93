"""Seeded generators for desk-scale test systems.

The transmission side is a 20-bus, two-voltage-level grid laid out on a
geographic box; half of its 69 kV buses feed a radial 12.47 kV feeder of a
few hundred nodes.  A matching trip table and depot list place vehicles on
the same map.  None of this is real data; it only has to be structurally
plausible and reproducible from the seed.
"""

from __future__ import annotations

import math

import numpy as np

from tdcosim.demand import Depot, Trip
from tdcosim.feeder import Feeder, FeederNode, PhaseLoad, Segment
from tdcosim.grid import Branch, Bus, Generator, LoadPoint, Network
from tdcosim.spatial import ground_distance_m

CENTER = (31.0, -96.5)

# typical overhead line, ohms per mile (aa ab ac bb bc cc)
_Z_THREE = (0.3465 + 1.0179j, 0.1560 + 0.5017j, 0.1580 + 0.4236j,
            0.3375 + 1.0478j, 0.1535 + 0.3849j, 0.3414 + 1.0348j)
_Z_SINGLE = 1.3292 + 1.3475j
_MILE_KM = 1.609344

# hourly multiplier of background demand
DEFAULT_LOAD_SHAPE = np.array([0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.76, 0.82, 0.86, 0.89, 0.92,
                               0.94, 0.96, 0.98, 1.00, 1.00, 0.99, 0.97, 0.93, 0.87, 0.80, 0.72, 0.66])


def _offset(center, dx_km, dy_km):
    lat = center[0] + dy_km / 111.195
    lon = center[1] + dx_km / (111.195 * math.cos(math.radians(center[0])))
    return (round(lat, 6), round(lon, 6))


def make_transmission(n_bus: int = 20, n_boundary: int = 10, seed: int = 1, rating_scale: float = 1.0,
                      span_km: float = 120.0) -> Network:
    """Meshed grid: a 138 kV ring of generator buses and 69 kV load buses.

    The first ``n_boundary`` 69 kV buses are flagged as boundary buses; each
    is tied to the two nearest higher-numbered buses so every bus has at
    least two paths.
    """
    rng = np.random.default_rng(seed)
    n_hv = max(4, n_bus // 5)
    buses = []
    pos = {}
    for i in range(1, n_bus + 1):
        if i <= n_hv:
            ang = 2 * math.pi * (i - 1) / n_hv
            x, y = 0.35 * span_km * math.cos(ang), 0.35 * span_km * math.sin(ang)
        else:
            x, y = rng.uniform(-0.5, 0.5, 2) * span_km
        pos[i] = (x, y)
        kv = 138.0 if i <= n_hv else 69.0
        boundary = n_hv < i <= n_hv + n_boundary
        buses.append(Bus(id=i, base_kv=kv, kind="slack" if i == 1 else ("pv" if i <= n_hv else "pq"),
                         v_min=0.94, v_max=1.06, location=_offset(CENTER, x, y), is_boundary=boundary,
                         area=1 + (i % 4)))
    branches = []
    for i in range(1, n_hv + 1):
        j = i % n_hv + 1
        branches.append(_line(pos, i, j, 138.0, rng, 400.0 * rating_scale))
    lv = list(range(n_hv + 1, n_bus + 1))
    linked = set()
    for i in lv:
        cands = sorted((math.dist(pos[i], pos[j]), j) for j in range(1, n_bus + 1) if j != i)
        for _, j in cands[:2]:
            key = (min(i, j), max(i, j))
            if key in linked:
                continue
            linked.add(key)
            kv = 69.0
            if j <= n_hv:
                branches.append(_transformer(i, j, rng, 150.0 * rating_scale))
            else:
                branches.append(_line(pos, key[0], key[1], kv, rng, 90.0 * rating_scale))
    # make sure every 69 kV bus reaches the ring
    import scipy.sparse as sp
    from scipy.sparse.csgraph import connected_components
    while True:
        rows = [b.from_bus - 1 for b in branches]
        cols = [b.to_bus - 1 for b in branches]
        graph = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_bus, n_bus))
        n_comp, labels = connected_components(graph, directed=False)
        if n_comp == 1:
            break
        island = [i for i in lv if labels[i - 1] != labels[0]]
        i = island[0]
        j = min((k for k in range(1, n_bus + 1) if labels[k - 1] == labels[0]),
                key=lambda k: math.dist(pos[i], pos[k]))
        branches.append(_transformer(i, j, rng, 150.0 * rating_scale) if j <= n_hv
                        else _line(pos, min(i, j), max(i, j), 69.0, rng, 90.0 * rating_scale))

    costs = [(0.0, 14.0, 0.010), (0.0, 20.0, 0.015), (0.0, 28.0, 0.020), (0.0, 45.0, 0.040),
             (0.0, 70.0, 0.080)]
    gens = []
    for k in range(min(n_hv, 4)):
        a, b, c = costs[k]
        gens.append(Generator(bus=k + 1, p_min=0.0, p_max=[260.0, 200.0, 160.0, 140.0][k],
                              q_min=-120.0, q_max=150.0, cost_a=a, cost_b=b, cost_c=c))
    # a small peaker on a 69 kV bus
    a, b, c = costs[4]
    gens.append(Generator(bus=n_bus, p_min=0.0, p_max=60.0, q_min=-30.0, q_max=40.0, cost_a=a, cost_b=b, cost_c=c))
    buses[n_bus - 1] = Bus(**{**buses[n_bus - 1].__dict__, "kind": "pv"})
    loads = []
    for i in lv:
        p = float(rng.uniform(15.0, 35.0))
        loads.append(LoadPoint(bus=i, p_base=round(p, 3), q_base=round(0.3 * p, 3)))
    return Network(buses=tuple(buses), branches=tuple(branches), generators=tuple(gens), loads=tuple(loads),
                   name=f"synthetic-{n_bus}")


def _line(pos, i, j, kv, rng, rating):
    km = max(math.dist(pos[i], pos[j]), 5.0)
    zbase = kv * kv / 100.0
    x = 0.40 * km / zbase
    r = 0.10 * km / zbase
    b = 2.9e-6 * km * zbase
    return Branch(from_bus=i, to_bus=j, r=round(r, 6), x=round(x, 6), b_shunt=round(b, 6),
                  s_rating=round(rating * float(rng.uniform(0.9, 1.1)), 1))


def _transformer(i, j, rng, rating):
    return Branch(from_bus=min(i, j), to_bus=max(i, j), r=0.002, x=round(float(rng.uniform(0.06, 0.09)), 5),
                  s_rating=round(rating, 1))


def make_feeder(fid: int, head_bus: int, n_nodes: int = 200, seed: int = 0, center=CENTER,
                kw_per_phase: tuple[float, float] = (4.0, 14.0)) -> Feeder:
    """Radial feeder: a three-phase trunk with single- and three-phase laterals."""
    rng = np.random.default_rng(seed)
    nodes = [FeederNode(0, "ABC", center)]
    segs = []
    loads = []
    xy = {0: (0.0, 0.0)}
    trunk_len = max(2, n_nodes // 4)
    trunk = [0]
    heading = float(rng.uniform(0, 2 * math.pi))
    for k in range(1, trunk_len):
        parent = trunk[-1]
        heading += float(rng.normal(0, 0.3))
        length = float(rng.uniform(0.15, 0.3))
        xy[k] = (xy[parent][0] + length * math.cos(heading), xy[parent][1] + length * math.sin(heading))
        nodes.append(FeederNode(k, "ABC", _offset(center, *xy[k])))
        segs.append(Segment(parent, k, tuple(z * length / _MILE_KM for z in _Z_THREE), rating_a=400.0))
        trunk.append(k)
    nid = trunk_len
    while nid < n_nodes:
        root = int(rng.choice(trunk[1:]))
        phase = "ABC" if rng.random() < 0.2 else str(rng.choice(list("ABC")))
        depth = int(rng.integers(2, 8))
        parent = root
        lat_heading = float(rng.uniform(0, 2 * math.pi))
        for _ in range(depth):
            if nid >= n_nodes:
                break
            length = float(rng.uniform(0.05, 0.15))
            xy[nid] = (xy[parent][0] + length * math.cos(lat_heading), xy[parent][1] + length * math.sin(lat_heading))
            nodes.append(FeederNode(nid, phase, _offset(center, *xy[nid])))
            if phase == "ABC":
                z = tuple(v * length / _MILE_KM for v in _Z_THREE)
                rating = 300.0
            else:
                zs = _Z_SINGLE * length / _MILE_KM
                p = "ABC".index(phase)
                diag = [0j, 0j, 0j]
                diag[p] = zs
                z = (diag[0], 0j, 0j, diag[1], 0j, diag[2])
                rating = 140.0
            segs.append(Segment(parent, nid, z, rating_a=rating))
            for ph in phase:
                p_kw = float(rng.uniform(*kw_per_phase))
                loads.append(PhaseLoad(nid, ph, round(p_kw, 3), round(0.33 * p_kw, 3)))
            parent = nid
            nid += 1
    return Feeder(id=fid, head_bus=head_bus, head_node=0, base_kv=12.47, nodes=tuple(nodes),
                  segments=tuple(segs), loads=tuple(loads))


def make_feeders(network: Network, n_nodes: int = 200, seed: int = 0) -> list[Feeder]:
    """One feeder per boundary bus, centred on the bus location."""
    out = []
    for k, bus in enumerate(b for b in network.buses if b.is_boundary):
        out.append(make_feeder(fid=k + 1, head_bus=bus.id, n_nodes=n_nodes, seed=seed * 1000 + k,
                               center=bus.location or CENTER))
    return out


def make_trips(feeders, n_vehicles: int = 400, n_trucks: int = 20, seed: int = 0):
    """Trip table and depots on the feeder map.

    Homes sit at feeder nodes; workplaces and other stops at nodes of other
    feeders.  Trucks run two to four legs and most end the day at a depot.
    """
    rng = np.random.default_rng(seed)
    places = [nd.location for f in feeders for nd in f.nodes if nd.location]
    if not places:
        raise ValueError("feeders carry no node locations")
    arr = np.array(places)
    kx = 111.195 * math.cos(math.radians(float(arr[:, 0].mean())))

    def pick(near=None, radius_km: float = 35.0):
        if near is None:
            return places[int(rng.integers(len(places)))]
        d = np.hypot((arr[:, 0] - near[0]) * 111.195, (arr[:, 1] - near[1]) * kx)
        cand = np.flatnonzero(d <= radius_km)
        return places[int(cand[rng.integers(len(cand))])]

    trips = []

    def miles(a, b):
        return round(max(ground_distance_m(a, b) / 1609.344 * 1.3, 1.0), 3)

    for vid in range(1, n_vehicles + 1):
        home = pick()
        u = rng.random()
        t = float(rng.uniform(6.0, 9.0))
        if u < 0.6:
            stops = [(pick(home), "work", float(rng.uniform(7.5, 9.5)))]
        elif u < 0.9:
            stops = [(pick(home), "other", float(rng.uniform(0.5, 2.0))),
                     (pick(home), "other", float(rng.uniform(0.5, 3.0)))]
            t = float(rng.uniform(9.0, 14.0))
        else:
            stops = [(pick(home), "work", float(rng.uniform(7.0, 9.0))),
                     (pick(home), "other", float(rng.uniform(0.5, 1.5)))]
        here = home
        legs = stops + [(home, "home", 0.0)]
        for n, (dest, purpose, dwell) in enumerate(legs):
            d = miles(here, dest)
            dur = d / 30.0
            trips.append(Trip(vid, here, dest, round(t, 4), round(min(t + dur, 23.99), 4), d, purpose,
                              is_first_of_day=n == 0, is_last_of_day=n == len(legs) - 1))
            t = min(t + dur + dwell, 23.0)
            here = dest

    depot_sites = [places[int(i)] for i in rng.choice(len(places), size=min(4, len(places)), replace=False)]
    depots = [Depot(k + 1, p) for k, p in enumerate(depot_sites[:2])]
    if len(depot_sites) > 2:
        depots.append(Depot(3, depot_sites[2], "midpoint"))
    if len(depot_sites) > 3:
        depots.append(Depot(4, depot_sites[3], "near-dallas"))
    for k in range(n_trucks):
        vid = n_vehicles + 1 + k
        base = depots[k % len(depots)].point
        t = float(rng.uniform(5.0, 8.0))
        here = base
        n_legs = int(rng.integers(2, 4))
        for n in range(n_legs):
            last = n == n_legs - 1
            dest = (base if rng.random() < 0.8 else pick()) if last else pick()
            d = min(miles(here, dest) + float(rng.uniform(10, 40)), 100.0)
            dur = d / 40.0
            trips.append(Trip(vid, here, dest, round(t, 4), round(min(t + dur, 23.5), 4), round(d, 3),
                              "other", is_first_of_day=n == 0, is_last_of_day=last,
                              vehicle_class="short-haul-truck"))
            t = min(t + dur + float(rng.uniform(0.3, 1.0)), 22.0)
            here = dest
    return trips, depots


def evening_ev_profile(peak_kw: float, peak_hour: int = 19, width: float = 2.5) -> np.ndarray:
    """Bell-shaped 24-hour EV profile in kW centred on ``peak_hour``."""
    h = np.arange(24)
    d = np.minimum(np.abs(h - peak_hour), 24 - np.abs(h - peak_hour))
    return peak_kw * np.exp(-0.5 * (d / width) ** 2)


def congest_boundary(network: Network, feeders, buses, headroom: float = 1.02) -> Network:
    """Tighten the ratings of every branch touching ``buses`` to their peak flow.

    Ratings become ``headroom`` times the from-side MVA flow of an OPF at
    full load with the feeder heads represented by their specified load, so
    any added EV demand behind those buses pushes the lines over nameplate.
    """
    from dataclasses import replace

    from tdcosim.opf import solve_acopf

    extra = {}
    for f in feeders:
        s = f.total_load() / 1000.0
        p, q = extra.get(f.head_bus, (0.0, 0.0))
        extra[f.head_bus] = (p + s.real, q + s.imag)
    sol = solve_acopf(network.with_added_loads(extra))
    chosen = set(buses)
    branches = list(network.branches)
    for k, br in enumerate(branches):
        if br.from_bus in chosen or br.to_bus in chosen:
            branches[k] = replace(br, s_rating=round(headroom * float(sol.branch_flows[k, 2]), 3))
    return replace(network, branches=tuple(branches), name=network.name + "-congested")


EXAMPLE_CONFIG = """\
# Desk-scale example run.  Paths are relative to this file.
network: case.json
feeders: feeders
trips: trips.csv
depots: depots.csv
seed: {seed}

scenarios:
  charge_rate: [200]
  season: [peak]
  adoption: [1.0]
  logic: [upon-arrival]
  corridor_depot: [midpoint]

fleet:
  ld_capacity_kwh: 60.0
  ld_consumption: 0.30
  truck_consumption: 1.8
  replications: 1

load_shape: [{shape}]

opf:
  max_iterations: 30
  segments: 10

cosim:
  v_tol: 1.0e-4
  p_tol: 1.0e-3
  max_rounds: 20

controller:
  enabled: true
  compare: false

capital_costs:
  transmission: 1000000.0
  distribution: 100000.0
"""


def write_example(out_dir, seed: int = 0, n_nodes: int = 200, n_vehicles: int = 400, n_trucks: int = 20,
                  congested: bool = False) -> None:
    """Write a complete runnable input set: case, feeders, trips, depots and config."""
    from pathlib import Path

    from tdcosim.demand import write_depots_csv, write_trips_csv
    from tdcosim.feeder import save_feeder
    from tdcosim.grid import save_case

    out = Path(out_dir)
    (out / "feeders").mkdir(parents=True, exist_ok=True)
    net = make_transmission(seed=seed + 1)
    feeders = make_feeders(net, n_nodes=n_nodes, seed=seed + 1)
    if congested:
        bnd = [b.id for b in net.buses if b.is_boundary][:3]
        net = congest_boundary(net, feeders, bnd)
    save_case(net, out / "case.json")
    for f in feeders:
        save_feeder(f, out / "feeders" / f"feeder_{f.id:02d}.json")
    trips, depots = make_trips(feeders, n_vehicles=n_vehicles, n_trucks=n_trucks, seed=seed + 1)
    write_trips_csv(trips, out / "trips.csv")
    write_depots_csv(depots, out / "depots.csv")
    shape = ", ".join(f"{v:.2f}" for v in DEFAULT_LOAD_SHAPE)
    (out / "config.yaml").write_text(EXAMPLE_CONFIG.format(seed=seed, shape=shape))
