"""Command-line front end.

Subcommands::

    tdcosim run --config run.yaml [--out DIR] [--workers N] [--force] [--seed N]
    tdcosim map --seeds seeds.csv --chargers chargers.csv --out DIR [--force]
    tdcosim plot RUN_DIR
    tdcosim example --out DIR [--seed N] [--congested] [--force]

Exit status: 0 success, 1 input or configuration error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from tdcosim.errors import InputError, ModelError, NumericalError, SolverError, TdCosimError

logger = logging.getLogger("tdcosim")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path exists and is not a directory: {path}")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise InputError(f"output directory {path} is not empty; pass --force to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- run

_INPUTS = None


def _init_worker(cfg) -> None:
    global _INPUTS
    from tdcosim.scenario import load_inputs

    _INPUTS = load_inputs(cfg)


def _run_one(cfg, params, out_dir: Path):
    """Worker entry: returns (summary rows, error message or None, error kind)."""
    from tdcosim.cosim import DayAbort
    from tdcosim.scenario import run_scenario

    try:
        return run_scenario(params, _INPUTS, cfg, out_dir), None, None
    except DayAbort as exc:
        _write_abort(out_dir, exc)
        return [], str(exc), "solver"
    except (SolverError, NumericalError) as exc:
        return [], str(exc), "solver"
    except (InputError, ModelError, TdCosimError, FileNotFoundError) as exc:
        return [], str(exc), "input"


def _write_abort(out_dir: Path, exc) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [str(exc), f"hours completed: {len(exc.completed)}"]
    cause = exc.__cause__
    while cause is not None:
        trace = getattr(cause, "trace", None)
        if trace:
            lines.append("boundary mismatch trace (dP MW, dV pu):")
            lines += [f"  {dp:.6e} {dv:.6e}" for dp, dv in trace]
        cause = cause.__cause__
    (out_dir / "error.txt").write_text("\n".join(lines) + "\n")


def cmd_run(args) -> int:
    from tdcosim.config import load_config
    from tdcosim.scenario import write_comparison, write_summary

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.scenarios = [replace(p, seed=args.seed) for p in cfg.scenarios]
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise InputError("no output directory: pass --out or set 'output' in the config")
    cfg.check_files()
    _prepare_out(out, args.force)
    workers = max(1, int(args.workers))
    jobs = [(p, out / p.name) for p in cfg.scenarios]
    results = []
    if workers == 1 or len(jobs) == 1:
        _init_worker(cfg)
        for p, d in jobs:
            logger.info("scenario %s", p.name)
            results.append(_run_one(cfg, p, d))
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(cfg,)) as pool:
            futures = [pool.submit(_run_one, cfg, p, d) for p, d in jobs]
            results = [f.result() for f in futures]
    rows, failed = [], []
    for (p, _), (r, err, kind) in zip(jobs, results):
        rows += r
        if err:
            failed.append((p.name, err, kind))
            print(f"scenario {p.name} failed: {err}", file=sys.stderr)
    write_summary(rows, out / "summary.csv")
    write_comparison(rows, out / "comparison.csv")
    if failed:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "kind", "message"])
            w.writerows([(n, k, e) for n, e, k in failed])
        return EXIT_SOLVER if any(k == "solver" for _, _, k in failed) else EXIT_INPUT
    print(f"{len(jobs)} scenario(s) written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- map

def cmd_map(args) -> int:
    from tdcosim.spatial import (
        BBox,
        Projection,
        aggregate_to_substation,
        build_voronoi,
        chargers_from_rows,
        map_chargers,
        partition_to_geojson,
        read_points_csv,
        seeds_from_rows,
        write_geojson,
    )

    for p in (args.seeds, args.chargers):
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    seed_rows = read_points_csv(args.seeds)
    charger_rows = read_points_csv(args.chargers)
    if not seed_rows:
        raise InputError(f"{args.seeds}: no seeds")
    proj = Projection.about([(r["lat"], r["lon"]) for r in seed_rows])
    seeds = seeds_from_rows(seed_rows, proj)
    chargers = chargers_from_rows(charger_rows, proj)
    pts = [s.point for s in seeds]
    lo = [min(p[0] for p in pts) - args.margin, min(p[1] for p in pts) - args.margin]
    hi = [max(p[0] for p in pts) + args.margin, max(p[1] for p in pts) + args.margin]
    part = build_voronoi(seeds, BBox(lo[0], lo[1], hi[0], hi[1]))
    out = Path(args.out)
    _prepare_out(out, args.force)
    assign = map_chargers(chargers, part)
    write_geojson(partition_to_geojson(part, proj), out / "territories.geojson")
    if args.substations:
        groups = {}
        for r in read_substation_map(args.substations):
            groups[r[0]] = r[1]
        agg = aggregate_to_substation(part, groups)
        write_geojson(partition_to_geojson(agg, proj), out / "substations.geojson")
    with open(out / "assignment.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["charger", "seed", "kind", "kw"])
        for c in sorted(chargers, key=lambda c: c.id):
            w.writerow([c.id, assign.region_of.get(c.id, ""), c.kind, f"{c.demand_kw:.6f}"])
    with open(out / "seed_load.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "kw", "chargers"])
        counts = {}
        for cid, r in assign.region_of.items():
            counts[r] = counts.get(r, 0) + 1
        for s in sorted(x.id for x in seeds):
            w.writerow([s, f"{assign.kw_by_region.get(s, 0.0):.6f}", counts.get(s, 0)])
    if assign.unassigned:
        print(f"{len(assign.unassigned)} charger(s) outside the territory box "
              f"({assign.total_unassigned_kw:.3f} kW): see assignment.csv", file=sys.stderr)
    ok = math.isclose(assign.total_assigned_kw + assign.total_unassigned_kw, assign.total_in_kw,
                      rel_tol=1e-12, abs_tol=1e-9)
    if not ok:
        raise InputError("charger demand not conserved")
    print(f"{len(seeds)} territories, {len(assign.region_of)} charger(s) assigned -> {out}")
    return EXIT_OK


def read_substation_map(path) -> list[tuple[int, int]]:
    """Rows of a ``seed, substation`` mapping CSV."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"seed", "substation"} <= set(reader.fieldnames or []):
            raise InputError(f"{path}: expected columns seed, substation")
        for line, row in enumerate(reader, start=2):
            try:
                out.append((int(row["seed"]), int(row["substation"])))
            except ValueError as exc:
                raise InputError(f"{path}:{line}: {exc}") from exc
    return out


# ---------------------------------------------------------------- plot / example

def cmd_plot(args) -> int:
    from tdcosim.plotting import plot_run

    written = plot_run(args.run_dir)
    print(f"{len(written)} figure(s) written")
    return EXIT_OK


def cmd_example(args) -> int:
    from tdcosim.synthetic import write_example

    out = Path(args.out)
    _prepare_out(out, args.force)
    write_example(out, seed=args.seed or 0, n_nodes=args.nodes, congested=args.congested)
    print(f"example inputs written to {out}; run with: tdcosim run --config {out / 'config.yaml'} --out RESULTS")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tdcosim", description="Transmission-distribution EV charging co-simulation")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario grid of a config file")
    run.add_argument("--config", required=True, help="run configuration (YAML)")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--workers", type=int, default=1, help="scenarios solved in parallel")
    run.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=cmd_run)

    mp = sub.add_parser("map", help="build service territories and assign chargers")
    mp.add_argument("--seeds", required=True, help="CSV of id, lat, lon[, kind]")
    mp.add_argument("--chargers", required=True, help="CSV of id, lat, lon, kind, kw")
    mp.add_argument("--substations", help="optional CSV of seed, substation for aggregated territories")
    mp.add_argument("--margin", type=float, default=1000.0, help="bounding-box margin in metres")
    mp.add_argument("--out", required=True, help="output directory")
    mp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    mp.add_argument("--seed", type=int, help="accepted for uniformity; mapping is not random")
    mp.set_defaults(func=cmd_map)

    pl = sub.add_parser("plot", help="render SVG figures for a finished run")
    pl.add_argument("run_dir", help="output directory of a run")
    pl.set_defaults(func=cmd_plot)

    ex = sub.add_parser("example", help="write a synthetic desk-scale input set")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--nodes", type=int, default=200, help="nodes per feeder")
    ex.add_argument("--congested", action="store_true", help="tighten ratings around three boundary buses")
    ex.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    ex.set_defaults(func=cmd_example)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, NumericalError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, TdCosimError) as exc:
        # ConfigError, InputError, ModelError and friends
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose > 1:
            traceback.print_exc()
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
