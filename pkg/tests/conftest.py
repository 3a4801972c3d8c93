from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from tdcosim.cli import main
from tdcosim.demand import write_depots_csv, write_trips_csv
from tdcosim.feeder import save_feeder
from tdcosim.grid import save_case
from tdcosim.synthetic import (
    DEFAULT_LOAD_SHAPE,
    EXAMPLE_CONFIG,
    make_feeders,
    make_transmission,
    make_trips,
)


def write_small_inputs(out: Path, seed: int = 2) -> Path:
    """An 8-bus, 20-node-feeder input set with its run configuration."""
    (out / "feeders").mkdir(parents=True, exist_ok=True)
    net = make_transmission(n_bus=8, n_boundary=3, seed=seed)
    feeders = make_feeders(net, n_nodes=20, seed=seed)
    save_case(net, out / "case.json")
    for f in feeders:
        save_feeder(f, out / "feeders" / f"feeder_{f.id:02d}.json")
    trips, depots = make_trips(feeders, n_vehicles=60, n_trucks=4, seed=seed)
    write_trips_csv(trips, out / "trips.csv")
    write_depots_csv(depots, out / "depots.csv")
    shape = ", ".join(f"{v:.2f}" for v in DEFAULT_LOAD_SHAPE)
    (out / "config.yaml").write_text(EXAMPLE_CONFIG.format(seed=0, shape=shape))
    return out / "config.yaml"


def write_map_inputs(out: Path, seed: int = 0) -> tuple[Path, Path, Path]:
    rng = np.random.default_rng(seed)
    out.mkdir(parents=True, exist_ok=True)
    seeds = rng.uniform([31.0, -97.0], [31.5, -96.4], (12, 2))
    chargers = rng.uniform([30.95, -97.05], [31.55, -96.35], (80, 2))
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon", "kind"])
        w.writerows([(i + 1, f"{a:.6f}", f"{b:.6f}", "distribution-node") for i, (a, b) in enumerate(seeds)])
    with open(out / "chargers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon", "kind", "kw"])
        for i, (a, b) in enumerate(chargers):
            w.writerow([i + 1, f"{a:.6f}", f"{b:.6f}", ["public", "workplace", "home-aggregate", "truck-depot"][i % 4],
                        f"{rng.uniform(2, 150):.3f}"])
    with open(out / "subs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "substation"])
        w.writerows([(i + 1, 100 + i % 4) for i in range(12)])
    return out / "seeds.csv", out / "chargers.csv", out / "subs.csv"


@pytest.fixture(scope="session")
def small_config(tmp_path_factory) -> Path:
    return write_small_inputs(tmp_path_factory.mktemp("inputs"))


@pytest.fixture(scope="session")
def run_pair(tmp_path_factory, small_config):
    """Two runs of the same configuration into separate directories."""
    root = tmp_path_factory.mktemp("runs")
    codes = [main(["run", "--config", str(small_config), "--out", str(root / name)]) for name in ("a", "b")]
    return codes, root / "a", root / "b"


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# acceptance criteria record their verdicts here; printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
