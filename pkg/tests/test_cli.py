from __future__ import annotations

import csv

import pytest

from conftest import tree_bytes, write_map_inputs
from tdcosim.cli import EXIT_INPUT, EXIT_OK, main


def test_run_writes_expected_artifacts(run_pair):
    (code, _), a, _ = run_pair
    assert code == EXIT_OK
    (scen,) = [p for p in a.iterdir() if p.is_dir()]
    names = {p.name for p in scen.iterdir()}
    assert {"hour_00.csv", "hour_23.csv", "hourly.csv", "profile.csv", "lmp_map.geojson",
            "overload_map.geojson", "capital_cost.csv"} <= names
    rows = list(csv.DictReader(open(a / "summary.csv")))
    assert len(rows) == 1 and int(rows[0]["max_rounds"]) <= 20


def test_run_refuses_non_empty_output_without_force(run_pair, small_config, capsys):
    _, a, _ = run_pair
    assert main(["run", "--config", str(small_config), "--out", str(a)]) == EXIT_INPUT
    assert "--force" in capsys.readouterr().err


def test_missing_and_bad_inputs(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("network: [\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_map_outputs_and_force(tmp_path):
    seeds, chargers, subs = write_map_inputs(tmp_path / "in")
    out = tmp_path / "map"
    assert main(["map", "--seeds", str(seeds), "--chargers", str(chargers), "--substations", str(subs),
                 "--out", str(out)]) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"territories.geojson", "substations.geojson", "assignment.csv",
                                               "seed_load.csv"}
    kw_in = sum(float(r["kw"]) for r in csv.DictReader(open(chargers)))
    kw_out = sum(float(r["kw"]) for r in csv.DictReader(open(out / "seed_load.csv")))
    unassigned = sum(float(r["kw"]) for r in csv.DictReader(open(out / "assignment.csv")) if not r["seed"])
    assert kw_out + unassigned == pytest.approx(kw_in, abs=1e-3)
    first = tree_bytes(out)
    assert main(["map", "--seeds", str(seeds), "--chargers", str(chargers), "--out", str(out)]) == EXIT_INPUT
    assert main(["map", "--seeds", str(seeds), "--chargers", str(chargers), "--substations", str(subs),
                 "--out", str(out), "--force"]) == EXIT_OK
    assert tree_bytes(out) == first
    assert main(["map", "--seeds", str(tmp_path / "x.csv"), "--chargers", str(chargers),
                 "--out", str(tmp_path / "m2")]) == EXIT_INPUT


def test_plot_renders_figures(run_pair, tmp_path):
    _, a, _ = run_pair
    import shutil

    copy = tmp_path / "run"
    shutil.copytree(a, copy)
    assert main(["plot", str(copy)]) == EXIT_OK
    svgs = sorted(copy.rglob("*.svg"))
    assert svgs
    before = {p: p.read_bytes() for p in svgs}
    assert main(["plot", str(copy)]) == EXIT_OK
    assert all(p.read_bytes() == b for p, b in before.items())
    assert main(["plot", str(tmp_path / "empty")]) == EXIT_INPUT


def test_example_writes_runnable_inputs(tmp_path):
    out = tmp_path / "ex"
    assert main(["example", "--out", str(out), "--nodes", "15"]) == EXIT_OK
    assert (out / "config.yaml").is_file() and len(list((out / "feeders").glob("*.json"))) == 10
    again = tmp_path / "ex2"
    assert main(["example", "--out", str(again), "--nodes", "15"]) == EXIT_OK
    assert tree_bytes(out) == tree_bytes(again)
