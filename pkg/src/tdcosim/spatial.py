"""Voronoi service territories, point location and charger-to-node mapping.

Cells are built per seed by clipping the bounding box with the perpendicular
bisector half-plane of every other seed, nearest seeds first, stopping once
no remaining seed can reach the cell.  Ties on a bisector belong to both
closed cells; :func:`locate` resolves them to the lowest seed id.

Coordinates are planar metres.  Latitude/longitude inputs go through a single
equirectangular :class:`Projection` about the region centroid.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import MultiPolygon, Polygon, mapping
import shapely

from tdcosim.errors import InputError, MappingError, RangeError

EARTH_RADIUS_M = 6371008.8
SEED_LEVELS = ("transmission-substation", "distribution-node")
CHARGER_KINDS = ("public", "workplace", "home-aggregate", "truck-depot")


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection about ``(lat0, lon0)``; x east, y north, metres."""

    lat0: float
    lon0: float

    @classmethod
    def about(cls, latlon) -> Projection:
        pts = np.asarray(latlon, dtype=float).reshape(-1, 2)
        if pts.size == 0:
            return cls(0.0, 0.0)
        return cls(float(pts[:, 0].mean()), float(pts[:, 1].mean()))

    def to_xy(self, lat, lon):
        k = math.cos(math.radians(self.lat0))
        x = EARTH_RADIUS_M * np.radians(np.asarray(lon, dtype=float) - self.lon0) * k
        y = EARTH_RADIUS_M * np.radians(np.asarray(lat, dtype=float) - self.lat0)
        return x, y

    def to_latlon(self, x, y):
        k = math.cos(math.radians(self.lat0))
        lat = self.lat0 + np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
        lon = self.lon0 + np.degrees(np.asarray(x, dtype=float) / (EARTH_RADIUS_M * k))
        return lat, lon


def ground_distance_m(a, b) -> float:
    """Great-circle distance between two (lat, lon) points in metres."""
    la1, lo1, la2, lo2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((la2 - la1) / 2) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class Seed:
    id: int
    point: tuple[float, float]
    level: str = "distribution-node"


@dataclass(frozen=True)
class ChargerSite:
    id: int
    point: tuple[float, float]
    kind: str = "public"
    demand_kw: float = 0.0
    demand_ref: str = ""


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals) or self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise InputError(f"degenerate bounding box {vals}")

    @classmethod
    def around(cls, points, margin: float = 0.05, min_size: float = 1.0) -> BBox:
        """Box around ``points`` widened by ``margin`` of its extent on each side."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = np.maximum((hi - lo) * margin, min_size)
        return cls(float(lo[0] - pad[0]), float(lo[1] - pad[1]), float(hi[0] + pad[0]), float(hi[1] + pad[1]))

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, p) -> bool:
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax

    def corners(self) -> np.ndarray:
        return np.array([[self.xmin, self.ymin], [self.xmax, self.ymin],
                         [self.xmax, self.ymax], [self.xmin, self.ymax]])


def _clip(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of convex ``poly`` with ``normal @ p <= offset``."""
    if len(poly) == 0:
        return poly
    side = poly @ normal - offset
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp_, sq = side[i], side[(i + 1) % n]
        if sp_ <= 0:
            out.append(p)
        if (sp_ < 0 < sq) or (sq < 0 < sp_):
            t = sp_ / (sp_ - sq)
            out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def convex_contains(poly: np.ndarray, p, strict: bool = False, eps: float = 1e-9) -> bool:
    """Point-in-convex-polygon test for a counterclockwise vertex list."""
    if len(poly) < 3:
        return False
    d = np.roll(poly, -1, axis=0) - poly
    cross = d[:, 0] * (p[1] - poly[:, 1]) - d[:, 1] * (p[0] - poly[:, 0])
    scale = eps * max(1.0, float(np.abs(poly).max()))
    return bool(np.all(cross > scale)) if strict else bool(np.all(cross >= -scale))


@dataclass
class VoronoiPartition:
    """Service territories keyed by region id.

    For a partition straight out of :func:`build_voronoi` every seed is its own
    region.  After :func:`aggregate_to_substation` the regions are unions of
    seed cells and ``group`` maps each seed to its region.
    """

    seeds: tuple[Seed, ...]
    bbox: BBox
    polygons: dict[int, np.ndarray]  # seed id -> convex cell, counterclockwise
    group: dict[int, int] = field(default_factory=dict)  # seed id -> region id

    def __post_init__(self):
        if not self.group:
            self.group = {s.id: s.id for s in self.seeds}
        self._ids = np.array([s.id for s in self.seeds])
        self._pts = np.array([s.point for s in self.seeds], dtype=float).reshape(-1, 2)

    @property
    def region_ids(self) -> list[int]:
        return sorted(set(self.group.values()))

    def members(self, region: int) -> list[int]:
        return sorted(s for s, r in self.group.items() if r == region)

    def region_geometry(self, region: int) -> Polygon | MultiPolygon:
        cells = [Polygon(self.polygons[s]) for s in self.members(region) if len(self.polygons[s]) >= 3]
        if len(cells) == 1:
            return cells[0]
        # independently clipped cells leave pinholes where three of them meet;
        # drop holes far smaller than any real enclave
        merged = shapely.union_all(cells, grid_size=1e-3)
        tiny = 1e-9 * self.bbox.area
        parts = [Polygon(p.exterior, [h for h in p.interiors if Polygon(h).area > tiny])
                 for p in getattr(merged, "geoms", [merged])]
        return parts[0] if len(parts) == 1 else MultiPolygon(parts)

    def region_area(self, region: int) -> float:
        return math.fsum(polygon_area(self.polygons[s]) for s in self.members(region))

    def nearest_seed(self, point) -> int:
        """Seed id at minimum distance, lowest id on ties."""
        p = np.asarray(point, dtype=float)
        if not self.bbox.contains(p):
            raise RangeError(f"point {tuple(p)} lies outside the bounding box")
        d2 = np.sum((self._pts - p) ** 2, axis=1)
        best = d2.min()
        ties = np.flatnonzero(d2 <= best * (1 + 1e-12))
        return int(self._ids[ties].min())

    def locate(self, point) -> int:
        """Region id whose territory contains ``point``."""
        return self.group[self.nearest_seed(point)]


def build_voronoi(seeds, bbox: BBox) -> VoronoiPartition:
    """Voronoi cells of ``seeds`` clipped to ``bbox`` by half-plane intersection.

    Raises:
        InputError: no seeds, duplicate ids or points, or a seed outside the box.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise InputError("at least one seed is required")
    ids = [s.id for s in seeds]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate seed ids")
    pts = np.array([s.point for s in seeds], dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InputError("seed coordinates must be finite")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise InputError("duplicate seed points")
    for s in seeds:
        if not bbox.contains(s.point):
            raise InputError(f"seed {s.id} lies outside the bounding box")
    tree = cKDTree(pts)
    box = bbox.corners()
    polygons = {}
    n = len(seeds)
    for i, s in enumerate(seeds):
        poly = box.copy()
        p = pts[i]
        k = min(n, 16)
        while True:
            dist, order = tree.query(p, k=k)
            dist, order = np.atleast_1d(dist), np.atleast_1d(order)
            done = False
            for d, j in zip(dist, order):
                if j == i:
                    continue
                reach = float(np.max(np.sum((poly - p) ** 2, axis=1))) ** 0.5
                if d > 2.0 * reach:
                    done = True
                    break
                q = pts[j]
                normal = q - p
                poly = _clip(poly, normal, float(normal @ (p + q) / 2.0))
            if done or k >= n:
                break
            k = min(n, 4 * k)
        polygons[s.id] = poly
    return VoronoiPartition(seeds=seeds, bbox=bbox, polygons=polygons)


def aggregate_to_substation(partition: VoronoiPartition, feeder_to_substation: dict) -> VoronoiPartition:
    """Group seed cells into substation territories.

    Raises:
        MappingError: a seed has no substation.
    """
    missing = [s.id for s in partition.seeds if s.id not in feeder_to_substation]
    if missing:
        raise MappingError(f"seeds without a substation: {sorted(missing)[:10]}")
    group = {s.id: feeder_to_substation[s.id] for s in partition.seeds}
    # regroup relative to the original seeds so aggregation composes
    group = {sid: group[sid] for sid in partition.group}
    return VoronoiPartition(seeds=partition.seeds, bbox=partition.bbox, polygons=partition.polygons, group=group)


@dataclass
class ChargerAssignment:
    region_of: dict[int, int]  # charger id -> region id
    kw_by_region: dict[int, float]
    unassigned: list[int]  # charger ids outside the bounding box
    total_in_kw: float
    total_assigned_kw: float
    total_unassigned_kw: float


def map_chargers(chargers, partition: VoronoiPartition) -> ChargerAssignment:
    """Assign every charger to one territory and total its demand per region.

    Chargers outside the bounding box are listed in ``unassigned``; nothing is
    dropped silently.  Sums use :func:`math.fsum` in charger-id order.
    """
    chargers = sorted(chargers, key=lambda c: c.id)
    region_of = {}
    parts: dict[int, list[float]] = {}
    unassigned = []
    assigned_vals, lost_vals = [], []
    for c in chargers:
        if not partition.bbox.contains(c.point):
            unassigned.append(c.id)
            lost_vals.append(c.demand_kw)
            continue
        r = partition.locate(c.point)
        region_of[c.id] = r
        parts.setdefault(r, []).append(c.demand_kw)
        assigned_vals.append(c.demand_kw)
    return ChargerAssignment(
        region_of=region_of,
        kw_by_region={r: math.fsum(v) for r, v in sorted(parts.items())},
        unassigned=unassigned,
        total_in_kw=math.fsum(c.demand_kw for c in chargers),
        total_assigned_kw=math.fsum(assigned_vals),
        total_unassigned_kw=math.fsum(lost_vals),
    )


# ---------------------------------------------------------------- I/O

def partition_to_geojson(partition: VoronoiPartition, projection: Projection | None = None,
                         properties: dict | None = None) -> dict:
    """FeatureCollection with one (Multi)Polygon per region.

    With a projection, coordinates are written as (lon, lat) degrees;
    otherwise as planar metres.  ``properties`` maps region id to extra
    feature properties.
    """
    features = []
    for r in partition.region_ids:
        geom = mapping(partition.region_geometry(r).buffer(0) if len(partition.members(r)) > 1
                       else partition.region_geometry(r))
        geom = _round_geometry(geom, projection)
        props = {"id": r, "area_m2": round(partition.region_area(r), 3), "seeds": partition.members(r)}
        if properties and r in properties:
            props.update(properties[r])
        features.append({"type": "Feature", "properties": props, "geometry": geom})
    return {"type": "FeatureCollection", "features": features}


def _round_geometry(geom: dict, projection: Projection | None) -> dict:
    def ring(coords):
        out = []
        for x, y in coords:
            if projection is not None:
                lat, lon = projection.to_latlon(x, y)
                out.append([round(float(lon), 7), round(float(lat), 7)])
            else:
                out.append([round(float(x), 3), round(float(y), 3)])
        return out

    if geom["type"] == "Polygon":
        return {"type": "Polygon", "coordinates": [ring(r) for r in geom["coordinates"]]}
    return {"type": "MultiPolygon", "coordinates": [[ring(r) for r in poly] for poly in geom["coordinates"]]}


def write_geojson(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _read_rows(path, required):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        missing = [c for c in required if c not in cols]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        return list(reader)


def read_points_csv(path) -> list[dict]:
    """Rows of an ``id, lat, lon, kind[, kw]`` CSV with typed values."""
    out = []
    for line, row in enumerate(_read_rows(path, ("id", "lat", "lon")), start=2):
        try:
            out.append({"id": int(row["id"]), "lat": float(row["lat"]), "lon": float(row["lon"]),
                        "kind": (row.get("kind") or "").strip(), "kw": float(row.get("kw") or 0.0)})
        except ValueError as exc:
            raise InputError(f"{path}:{line}: {exc}") from exc
    ids = [r["id"] for r in out]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise InputError(f"{path}: duplicate ids {dup[:10]}")
    return out


def seeds_from_rows(rows, projection: Projection) -> list[Seed]:
    seeds = []
    for r in rows:
        x, y = projection.to_xy(r["lat"], r["lon"])
        level = r["kind"] or "distribution-node"
        if level not in SEED_LEVELS:
            raise InputError(f"seed {r['id']}: unknown level {level!r}")
        seeds.append(Seed(r["id"], (float(x), float(y)), level))
    return seeds


def chargers_from_rows(rows, projection: Projection) -> list[ChargerSite]:
    out = []
    for r in rows:
        x, y = projection.to_xy(r["lat"], r["lon"])
        kind = r["kind"] or "public"
        if kind not in CHARGER_KINDS:
            raise InputError(f"charger {r['id']}: unknown kind {kind!r}")
        out.append(ChargerSite(r["id"], (float(x), float(y)), kind, r["kw"]))
    return out
