"""Hourly EV charging demand from trip tables.

Light-duty vehicles follow three charging logics:

* public: before an "other"-purpose leg that does not start at home, if the
  leg would leave less range than the driver's anxiety threshold, the car
  fast-charges at 100 kW at the leg origin, to full or for as long as the
  dwell between trips allows;
* workplace: a trip ending at work charges to full at 19 kW, limited by the
  dwell until the next departure;
* home: after the last trip of the day, if it ends at home, the car charges
  to full at 2.4 kW.

Short-haul trucks charge overnight at depots at the scenario charge rate.
Under the start-at-midnight logic every overnight event (home and depot)
starts at hour 0 instead of on arrival.  A profile covers one day; events
that run past midnight wrap to the start of the same day.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tdcosim.errors import ConfigError, InputError
from tdcosim.spatial import ground_distance_m

PUBLIC_RATE_KW = 100.0
WORKPLACE_RATE_KW = 19.0
HOME_RATE_KW = 2.4
TRUCK_RANGE_MI = 350.0
DEPOT_RADIUS_M = 100.0
ANXIETY_MEAN_MI = 32.9

CHARGE_RATES = (100.0, 200.0, 300.0)
SEASONS = ("peak", "shoulder")
ADOPTIONS = (0.25, 0.50, 0.75, 1.00)
LOGICS = ("upon-arrival", "start-at-midnight")
CORRIDOR_DEPOTS = ("midpoint", "near-dallas")
PURPOSES = ("home", "work", "other")
VEHICLE_CLASSES = ("light-duty", "short-haul-truck")


@dataclass(frozen=True)
class Trip:
    vehicle_id: int
    origin: tuple[float, float]  # (lat, lon)
    destination: tuple[float, float]
    start: float  # hour of day
    end: float
    distance: float  # miles
    purpose: str = "other"  # purpose at the destination
    is_first_of_day: bool = False
    is_last_of_day: bool = False
    vehicle_class: str = "light-duty"

    def __post_init__(self):
        if self.distance < 0:
            raise InputError(f"vehicle {self.vehicle_id}: negative trip distance")
        if self.end < self.start:
            raise InputError(f"vehicle {self.vehicle_id}: trip ends before it starts")
        if self.purpose not in PURPOSES:
            raise InputError(f"vehicle {self.vehicle_id}: unknown purpose {self.purpose!r}")
        if self.vehicle_class not in VEHICLE_CLASSES:
            raise InputError(f"vehicle {self.vehicle_id}: unknown class {self.vehicle_class!r}")


@dataclass(frozen=True)
class VehicleState:
    capacity_kwh: float
    consumption: float  # kWh per mile
    soc_kwh: float
    anxiety_miles: float = ANXIETY_MEAN_MI

    def __post_init__(self):
        if not 0 <= self.soc_kwh <= self.capacity_kwh + 1e-9:
            raise InputError("state of charge outside [0, capacity]")
        if self.anxiety_miles <= 0:
            raise InputError("anxiety threshold must be positive")

    @property
    def range_miles(self) -> float:
        return self.capacity_kwh / self.consumption


@dataclass(frozen=True)
class FleetSpec:
    """Vehicle parameters that have no published defaults and must be configured."""

    ld_capacity_kwh: float
    ld_consumption: float  # kWh/mile
    truck_consumption: float  # kWh/mile
    truck_range_mi: float = TRUCK_RANGE_MI
    season_multiplier: dict = field(default_factory=lambda: {"peak": 1.15, "shoulder": 1.0})
    anxiety_shape: float = 2.0
    replications: int = 1

    def __post_init__(self):
        for name in ("ld_capacity_kwh", "ld_consumption", "truck_consumption", "truck_range_mi", "anxiety_shape"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"fleet parameter {name} must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        missing = set(SEASONS) - set(self.season_multiplier)
        if missing:
            raise ConfigError(f"season multiplier missing for {sorted(missing)}")


@dataclass(frozen=True)
class ScenarioParams:
    charge_rate: float = 200.0
    season: str = "peak"
    adoption: float = 1.0
    logic: str = "upon-arrival"
    corridor_depot: str = "midpoint"
    seed: int = 0

    def __post_init__(self):
        if self.charge_rate not in CHARGE_RATES:
            raise ConfigError(f"charge_rate must be one of {CHARGE_RATES}")
        if self.season not in SEASONS:
            raise ConfigError(f"season must be one of {SEASONS}")
        if self.adoption not in ADOPTIONS:
            raise ConfigError(f"adoption must be one of {ADOPTIONS}")
        if self.logic not in LOGICS:
            raise ConfigError(f"logic must be one of {LOGICS}")
        if self.corridor_depot not in CORRIDOR_DEPOTS:
            raise ConfigError(f"corridor_depot must be one of {CORRIDOR_DEPOTS}")

    @property
    def name(self) -> str:
        return (f"r{int(self.charge_rate)}_{self.season}_a{int(round(self.adoption * 100)):03d}_"
                f"{'arrival' if self.logic == 'upon-arrival' else 'midnight'}_{self.corridor_depot}")


def scenario_grid(charge_rates=CHARGE_RATES, seasons=SEASONS, adoptions=ADOPTIONS, logics=LOGICS,
                  corridor_depots=CORRIDOR_DEPOTS, seed: int = 0) -> list[ScenarioParams]:
    """Cartesian product of the scenario dimensions (96 combinations by default)."""
    return [ScenarioParams(r, s, a, lg, c, seed)
            for r, s, a, lg, c in itertools.product(charge_rates, seasons, adoptions, logics, corridor_depots)]


@dataclass(frozen=True)
class ChargingEvent:
    vehicle_id: int
    location: tuple[float, float]
    start: float  # hour
    energy_kwh: float
    rate_kw: float
    kind: str  # public, workplace, home, truck-depot
    overnight: bool = False

    @property
    def duration(self) -> float:
        return self.energy_kwh / self.rate_kw if self.rate_kw > 0 else 0.0


@dataclass
class EventResult:
    events: list[ChargingEvent]
    infeasible: list[int]  # indices of trips the vehicle could not complete
    final_soc: float


# ---------------------------------------------------------------- sampling

def sample_fleet(trips, adoption: float, seed) -> list[Trip]:
    """Trips of ``round(adoption * n_vehicles)`` vehicles drawn without replacement."""
    if not 0.0 <= adoption <= 1.0:
        raise InputError(f"adoption {adoption} outside [0, 1]")
    trips = list(trips)
    vehicles = sorted({t.vehicle_id for t in trips})
    k = int(round(adoption * len(vehicles)))
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    chosen = {vehicles[i] for i in rng.choice(len(vehicles), size=k, replace=False)}
    return [t for t in trips if t.vehicle_id in chosen]


def sample_range_anxiety(rng, size=None, mean: float = ANXIETY_MEAN_MI, shape: float = 2.0):
    """Gamma-distributed anxiety threshold in miles with the given mean and shape."""
    if shape <= 0 or mean <= 0:
        raise InputError("gamma shape and mean must be positive")
    return rng.gamma(shape, mean / shape, size)


# ---------------------------------------------------------------- light duty

def assign_charging_events(trips, state: VehicleState, params: ScenarioParams,
                           anxiety=None, season_multiplier: float = 1.0) -> EventResult:
    """Charging events of one light-duty vehicle over one day.

    ``anxiety`` optionally gives one threshold (miles) per trip; otherwise the
    state's threshold applies to every trip.
    """
    trips = list(trips)
    for a, b in zip(trips, trips[1:]):
        if b.start < a.end - 1e-9:
            raise InputError(f"vehicle {a.vehicle_id}: trips overlap or are not time-ordered")
    cap = state.capacity_kwh
    rate_per_mile = state.consumption * season_multiplier
    soc = state.soc_kwh
    events: list[ChargingEvent] = []
    infeasible: list[int] = []
    midnight = params.logic == "start-at-midnight"
    for n, trip in enumerate(trips):
        need = trip.distance * rate_per_mile
        threshold = state.anxiety_miles if anxiety is None else float(anxiety[n])
        from_home = n == 0 or trips[n - 1].purpose == "home"
        if need > cap + 1e-9:
            infeasible.append(n)
            soc = 0.0
            continue
        if trip.purpose == "other" and not from_home and n > 0:
            if (soc - need) / rate_per_mile < threshold:
                dwell = trip.start - trips[n - 1].end
                energy = cap - soc
                if dwell > 0:
                    energy = min(energy, PUBLIC_RATE_KW * dwell)
                if energy > 1e-12:
                    events.append(ChargingEvent(trip.vehicle_id, trip.origin, trips[n - 1].end, energy,
                                                PUBLIC_RATE_KW, "public"))
                    soc += energy
        soc -= need
        if soc < -1e-9:
            infeasible.append(n)
            soc = 0.0
        soc = max(soc, 0.0)
        last = trip.is_last_of_day or n == len(trips) - 1
        if trip.purpose == "work" and not last:
            dwell = trips[n + 1].start - trip.end
            energy = min(cap - soc, WORKPLACE_RATE_KW * max(dwell, 0.0))
            if energy > 1e-12:
                events.append(ChargingEvent(trip.vehicle_id, trip.destination, trip.end, energy,
                                            WORKPLACE_RATE_KW, "workplace"))
                soc += energy
        elif trip.purpose == "work":
            energy = cap - soc
            if energy > 1e-12:
                events.append(ChargingEvent(trip.vehicle_id, trip.destination, trip.end, energy,
                                            WORKPLACE_RATE_KW, "workplace"))
                soc += energy
        if last and trip.purpose == "home":
            energy = cap - soc
            if energy > 1e-12:
                start = 0.0 if midnight else trip.end
                events.append(ChargingEvent(trip.vehicle_id, trip.destination, start, energy,
                                            HOME_RATE_KW, "home", overnight=True))
                soc += energy
    return EventResult(events=events, infeasible=infeasible, final_soc=soc)


# ---------------------------------------------------------------- trucks

@dataclass(frozen=True)
class Depot:
    id: int
    point: tuple[float, float]  # (lat, lon)
    corridor: str = ""  # "", "midpoint" or "near-dallas"


def active_depots(depots, params: ScenarioParams) -> list[Depot]:
    """Urban depots plus the corridor depot selected by the scenario."""
    return [d for d in depots if d.corridor in ("", params.corridor_depot)]


@dataclass
class DepotResult:
    events: list[ChargingEvent]
    delivered_kwh: dict[int, float]  # depot id -> kWh, including residual shares
    residual_kwh: float  # demand from trucks that did not end at a depot
    shortfall_kwh: float  # energy the overnight window could not deliver
    infeasible: list[tuple[int, int]]  # (vehicle id, trip index)


def truck_depot_demand(trips, depots, params: ScenarioParams, fleet: FleetSpec) -> DepotResult:
    """Overnight depot charging for short-haul trucks.

    A truck whose last trip of the day ends within 100 m of a depot charges
    there at ``params.charge_rate`` until full or until its first trip of the
    next day.  The day's energy of trucks ending elsewhere is spread over the
    depots in proportion to the energy they already deliver (equally if none
    deliver any).

    Raises:
        ConfigError: trucks exist but no depot is defined.
    """
    by_vehicle: dict[int, list[Trip]] = {}
    for t in trips:
        if t.vehicle_class == "short-haul-truck":
            by_vehicle.setdefault(t.vehicle_id, []).append(t)
    if not by_vehicle:
        return DepotResult([], {}, 0.0, 0.0, [])
    depots = list(depots)
    if not depots:
        raise ConfigError("trucks are present but no depots are defined")
    mult = fleet.season_multiplier[params.season]
    per_mile = fleet.truck_consumption * mult
    capacity = fleet.truck_range_mi * fleet.truck_consumption
    rate = params.charge_rate
    midnight = params.logic == "start-at-midnight"
    delivered = {d.id: 0.0 for d in depots}
    events: list[ChargingEvent] = []
    stranded: list[tuple[int, float, float]] = []  # (vehicle, kWh, arrival hour)
    shortfall = 0.0
    infeasible = []
    for vid in sorted(by_vehicle):
        vt = sorted(by_vehicle[vid], key=lambda t: t.start)
        used = 0.0
        for n, t in enumerate(vt):
            if t.distance > fleet.truck_range_mi:
                infeasible.append((vid, n))
            used += t.distance * per_mile
        need = min(used, capacity)
        last = vt[-1]
        near = [(ground_distance_m(last.destination, d.point), d.id, d) for d in depots]
        dist, _, depot = min(near, key=lambda x: (x[0], x[1]))
        if dist > DEPOT_RADIUS_M:
            if need > 0:
                stranded.append((vid, need, last.end))
            continue
        first = vt[0].start
        window = first if midnight else (24.0 - last.end) + first
        energy = min(need, rate * max(window, 0.0))
        shortfall += need - energy
        if energy > 0:
            start = 0.0 if midnight else last.end
            events.append(ChargingEvent(vid, depot.point, start, energy, rate, "truck-depot", overnight=True))
            delivered[depot.id] += energy
    residual = math.fsum(s[1] for s in stranded)
    if residual > 0:
        base = {d.id: delivered[d.id] for d in depots}
        total = math.fsum(base.values())
        weights = ({k: v / total for k, v in base.items()} if total > 0
                   else {d.id: 1.0 / len(depots) for d in depots})
        for vid, kwh, arrival in stranded:
            start = 0.0 if midnight else arrival
            for d in depots:
                share = kwh * weights[d.id]
                if share > 0:
                    events.append(ChargingEvent(vid, d.point, start, share, rate, "truck-depot", overnight=True))
                    delivered[d.id] += share
    return DepotResult(events, delivered, residual, shortfall, infeasible)


# ---------------------------------------------------------------- profiles

@dataclass
class DemandProfile:
    """Hourly kW per (location, kind); rows sorted for reproducible output."""

    kw: dict[tuple[tuple[float, float], str], np.ndarray] = field(default_factory=dict)

    def add(self, location, kind: str, hourly: np.ndarray) -> None:
        key = (tuple(location), kind)
        if key in self.kw:
            self.kw[key] = self.kw[key] + hourly
        else:
            self.kw[key] = np.array(hourly, dtype=float)

    def hourly_totals(self) -> np.ndarray:
        out = np.zeros(24)
        for key in sorted(self.kw):
            out += self.kw[key]
        return out

    def total_energy_kwh(self) -> float:
        return math.fsum(float(v) for key in sorted(self.kw) for v in self.kw[key])

    def scaled(self, factor: float) -> DemandProfile:
        return DemandProfile({k: v * factor for k, v in self.kw.items()})

    def rows(self):
        """(lat, lon, hour, kW, kind) rows with non-zero demand, sorted."""
        for (loc, kind) in sorted(self.kw):
            for h, v in enumerate(self.kw[(loc, kind)]):
                if v != 0.0:
                    yield loc[0], loc[1], h, float(v), kind


def spread_event(start: float, energy: float, rate: float) -> np.ndarray:
    """Energy per hour-of-day (kWh, equal to average kW) of one uninterrupted event."""
    out = np.zeros(24)
    if energy <= 0:
        return out
    if rate <= 0:
        raise InputError("charging rate must be positive")
    t = start % 24.0
    left = energy
    while left > 0:
        h = math.floor(t)
        take = min((h + 1.0 - t) * rate, left)
        out[h % 24] += take
        left -= take
        t = h + 1.0
    return out


_PROFILE_KIND = {"public": "public", "workplace": "workplace", "home": "home-aggregate",
                 "truck-depot": "truck-depot"}


def build_profile(events, params: ScenarioParams | None = None) -> DemandProfile:
    """Spread events over the hours of the day at their charging rate.

    Events already carry their start hour; the start-at-midnight logic is
    applied when the events are generated.
    """
    prof = DemandProfile()
    for ev in events:
        prof.add(ev.location, _PROFILE_KIND.get(ev.kind, ev.kind), spread_event(ev.start, ev.energy_kwh, ev.rate_kw))
    return prof


@dataclass
class ScenarioDemand:
    profile: DemandProfile
    event_energy_kwh: float
    infeasible_trips: int
    depot: list[DepotResult]


def generate_demand(trips, depots, params: ScenarioParams, fleet: FleetSpec) -> ScenarioDemand:
    """Average profile over ``fleet.replications`` seeded replications."""
    trips = list(trips)
    ld = [t for t in trips if t.vehicle_class == "light-duty"]
    trucks = [t for t in trips if t.vehicle_class == "short-haul-truck"]
    mult = fleet.season_multiplier[params.season]
    seqs = np.random.SeedSequence(params.seed).spawn(fleet.replications)
    total = DemandProfile()
    energy = []
    bad = 0
    depot_results = []
    for ss in seqs:
        fleet_seed, anx_seed = ss.spawn(2)
        chosen = sample_fleet(ld, params.adoption, fleet_seed) + sample_fleet(trucks, params.adoption, fleet_seed)
        rng = np.random.default_rng(anx_seed)
        events = []
        by_vehicle: dict[int, list[Trip]] = {}
        for t in chosen:
            if t.vehicle_class == "light-duty":
                by_vehicle.setdefault(t.vehicle_id, []).append(t)
        for vid in sorted(by_vehicle):
            vt = sorted(by_vehicle[vid], key=lambda t: t.start)
            anxiety = sample_range_anxiety(rng, len(vt), shape=fleet.anxiety_shape)
            state = VehicleState(fleet.ld_capacity_kwh, fleet.ld_consumption, fleet.ld_capacity_kwh)
            res = assign_charging_events(vt, state, params, anxiety=anxiety, season_multiplier=mult)
            events += res.events
            bad += len(res.infeasible)
        dres = truck_depot_demand(chosen, active_depots(depots, params), params, fleet)
        depot_results.append(dres)
        events += dres.events
        bad += len(dres.infeasible)
        energy += [e.energy_kwh for e in events]
        prof = build_profile(events, params)
        for key in sorted(prof.kw):
            total.add(key[0], key[1], prof.kw[key])
    r = fleet.replications
    return ScenarioDemand(profile=total.scaled(1.0 / r) if r > 1 else total,
                          event_energy_kwh=math.fsum(energy) / r, infeasible_trips=bad, depot=depot_results)


# ---------------------------------------------------------------- CSV I/O

_TRUE = {"1", "true", "yes", "y", "t"}


def read_trips_csv(path) -> list[Trip]:
    """Trip table with columns vehicle_id, origin_lat, origin_lon, dest_lat,
    dest_lon, start, end, distance, purpose, is_first_of_day, is_last_of_day,
    vehicle_class."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(Trip(
                    vehicle_id=int(row["vehicle_id"]),
                    origin=(float(row["origin_lat"]), float(row["origin_lon"])),
                    destination=(float(row["dest_lat"]), float(row["dest_lon"])),
                    start=float(row["start"]), end=float(row["end"]), distance=float(row["distance"]),
                    purpose=row["purpose"].strip(),
                    is_first_of_day=row.get("is_first_of_day", "").strip().lower() in _TRUE,
                    is_last_of_day=row.get("is_last_of_day", "").strip().lower() in _TRUE,
                    vehicle_class=(row.get("vehicle_class") or "light-duty").strip(),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{line}: {exc}") from exc
    return out


def write_trips_csv(trips, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "origin_lat", "origin_lon", "dest_lat", "dest_lon", "start", "end",
                    "distance", "purpose", "is_first_of_day", "is_last_of_day", "vehicle_class"])
        for t in trips:
            w.writerow([t.vehicle_id, f"{t.origin[0]:.6f}", f"{t.origin[1]:.6f}", f"{t.destination[0]:.6f}",
                        f"{t.destination[1]:.6f}", f"{t.start:.4f}", f"{t.end:.4f}", f"{t.distance:.4f}",
                        t.purpose, int(t.is_first_of_day), int(t.is_last_of_day), t.vehicle_class])


def read_depots_csv(path) -> list[Depot]:
    """Depot table with columns id, lat, lon and an optional corridor tag."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(Depot(int(row["id"]), (float(row["lat"]), float(row["lon"])),
                                 (row.get("corridor") or "").strip()))
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}:{line}: {exc}") from exc
    ids = [d.id for d in out]
    if len(ids) != len(set(ids)):
        raise InputError(f"{path}: duplicate depot ids")
    return out


def write_depots_csv(depots, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon", "corridor"])
        for d in depots:
            w.writerow([d.id, f"{d.point[0]:.6f}", f"{d.point[1]:.6f}", d.corridor])


def write_profile_csv(profile: DemandProfile, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "hour", "kw", "kind"])
        for lat, lon, h, kw, kind in profile.rows():
            w.writerow([f"{lat:.6f}", f"{lon:.6f}", h, f"{kw:.6f}", kind])


def read_profile_csv(path) -> DemandProfile:
    prof = DemandProfile()
    path = Path(path)
    with path.open(newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                hourly = np.zeros(24)
                h = int(row["hour"])
                if not 0 <= h < 24:
                    raise ValueError(f"hour {h} outside 0-23")
                kw = float(row["kw"])
                if kw < 0:
                    raise ValueError("negative kW")
                hourly[h] = kw
                prof.add((float(row["lat"]), float(row["lon"])), row["kind"], hourly)
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}:{line}: {exc}") from exc
    return prof
