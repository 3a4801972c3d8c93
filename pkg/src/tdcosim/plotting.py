"""Static SVG figures rendered from run artifacts.

Figures are derived from the CSV and GeoJSON outputs only, so a plot can be
regenerated from a finished run directory.  The SVG writer is configured for
byte-stable output (fixed hash salt, no timestamp).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection, PatchCollection  # noqa: E402
from matplotlib.patches import Polygon as MplPolygon  # noqa: E402

from tdcosim.errors import InputError  # noqa: E402

plt.rcParams["svg.hashsalt"] = "tdcosim"
plt.rcParams["svg.fonttype"] = "none"

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def _require(directory: Path, names) -> None:
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise InputError(f"{directory}: missing run artifact(s) {', '.join(missing)}")


def hourly_demand(profile_csv) -> dict[str, np.ndarray]:
    """Hourly kW per charger kind from a profile CSV."""
    out: dict[str, np.ndarray] = {}
    with open(profile_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            arr = out.setdefault(row["kind"], np.zeros(24))
            arr[int(row["hour"])] += float(row["kw"])
    return dict(sorted(out.items()))


def plot_demand_curves(curves: dict[str, np.ndarray], path, title: str = "EV charging demand") -> None:
    """One line per labelled 24-hour curve, in MW."""
    fig, ax = plt.subplots(figsize=(7, 4))
    hours = np.arange(24)
    for label in sorted(curves):
        ax.plot(hours, curves[label] / 1000.0, marker="o", ms=3, lw=1.2, label=label)
    ax.set_xlabel("hour of day")
    ax.set_ylabel("demand (MW)")
    ax.set_xticks(range(0, 24, 2))
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def _rings(geom):
    if geom is None:
        return []
    if geom["type"] == "Polygon":
        return [geom["coordinates"][0]]
    if geom["type"] == "MultiPolygon":
        return [poly[0] for poly in geom["coordinates"]]
    return []


def plot_lmp_map(geojson_path, path, hour: int | None = None) -> None:
    """Territories shaded by boundary-bus LMP at ``hour`` (peak over the day if None)."""
    data = json.loads(Path(geojson_path).read_text())
    patches, values = [], []
    for feat in data["features"]:
        props = feat["properties"]
        val = props["peak_lmp"] if hour is None else props["lmp"][hour]
        for ring in _rings(feat["geometry"]):
            patches.append(MplPolygon(np.asarray(ring), closed=True))
            values.append(val)
    fig, ax = plt.subplots(figsize=(6, 6))
    if patches:
        pc = PatchCollection(patches, cmap="viridis", edgecolor="white", linewidth=0.4)
        pc.set_array(np.asarray(values))
        ax.add_collection(pc)
        fig.colorbar(pc, ax=ax, label="LMP ($/MWh)", shrink=0.8)
        ax.autoscale_view()
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title("LMP by substation territory" + ("" if hour is None else f", hour {hour:02d}"))
    fig.tight_layout()
    _save(fig, path)


def plot_overload_map(geojson_path, path) -> None:
    """Transmission branches in grey, overloaded elements in red."""
    data = json.loads(Path(geojson_path).read_text())
    normal, hot = [], []
    for feat in data["features"]:
        geom = feat["geometry"]
        if geom is None or geom["type"] != "LineString":
            continue
        (hot if feat["properties"].get("overloaded") else normal).append(geom["coordinates"])
    fig, ax = plt.subplots(figsize=(6, 6))
    if normal:
        ax.add_collection(LineCollection(normal, colors="0.6", linewidths=1.0, label="within rating"))
    if hot:
        ax.add_collection(LineCollection(hot, colors="tab:red", linewidths=2.2, label="overloaded"))
    if normal or hot:
        ax.autoscale_view()
        ax.legend(fontsize=8, loc="upper left")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(f"Overloaded elements ({len(hot)})")
    fig.tight_layout()
    _save(fig, path)


def _day_dirs(run_dir: Path) -> list[Path]:
    return sorted(p.parent for p in run_dir.rglob("hourly.csv"))


def plot_run(run_dir) -> list[Path]:
    """Render every figure for a run directory; returns the written paths.

    Raises:
        InputError: the directory holds no scenario results, or a scenario
            directory lacks one of the artifacts a figure needs.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise InputError(f"run directory not found: {run_dir}")
    days = _day_dirs(run_dir)
    if not days:
        raise InputError(f"{run_dir}: no scenario results (hourly.csv) found")
    written = []
    curves = {}
    for d in days:
        _require(d, ["lmp_map.geojson", "overload_map.geojson"])
        fig_dir = d / "figures"
        fig_dir.mkdir(exist_ok=True)
        plot_lmp_map(d / "lmp_map.geojson", fig_dir / "lmp_map.svg")
        plot_overload_map(d / "overload_map.geojson", fig_dir / "overload_map.svg")
        written += [fig_dir / "lmp_map.svg", fig_dir / "overload_map.svg"]
    scen_dirs = sorted({p.parent for p in run_dir.rglob("profile.csv")})
    if not scen_dirs:
        raise InputError(f"{run_dir}: missing run artifact(s) profile.csv")
    for s in scen_dirs:
        by_kind = hourly_demand(s / "profile.csv")
        plot_demand_curves(by_kind, s / "demand_by_kind.svg", title=f"EV charging demand, {s.name}")
        written.append(s / "demand_by_kind.svg")
        curves[s.name] = sum(by_kind.values(), np.zeros(24))
    plot_demand_curves(curves, run_dir / "demand_curves.svg", title="EV charging demand by scenario")
    written.append(run_dir / "demand_curves.svg")
    return written
