from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from oracles import congested_pair, dispatch_grid_oracle, five_bus, single_bus, two_bus
from tdcosim.errors import ConfigError, ModelError
from tdcosim.grid import Branch, Bus, Generator, LoadPoint, Network
from tdcosim.opf import OpfOptions, solve_acopf, write_solution_csv
from tdcosim.powerflow import branch_flow, solve_acpf


def test_single_unit_lmp_is_marginal_cost():
    sol = solve_acopf(single_bus())
    assert sol.dispatch_p[0] == pytest.approx(100.0, abs=1e-6)
    assert sol.lmp[0] == pytest.approx(20.0 + 2 * 0.01 * 100.0, rel=0.05)
    # 0.1 MW grid search over the single unit's output: only the balanced output is feasible
    grid = np.arange(0.0, 300.05, 0.1)
    feasible = grid[np.abs(grid - 100.0) < 0.05]
    assert sol.objective == pytest.approx(min(single_bus().generators[0].cost(p) for p in feasible), abs=1e-6)


def test_lmp_within_loss_tolerance_over_a_line():
    sol = solve_acopf(two_bus(100.0, 0.0, x=0.05, r=0.01))
    mc = 20.0 + 2 * 0.01 * sol.dispatch_p[0]
    assert np.all(np.abs(sol.lmp - mc) <= 0.05 * mc)
    assert sol.lmp[1] >= sol.lmp[0]


def test_congested_pair_matches_dispatch_grid():
    net = congested_pair()
    sol = solve_acopf(net)
    cost, p1, p2 = dispatch_grid_oracle(net)
    assert abs(sol.dispatch_p[0] - p1) <= 1.0
    assert abs(sol.dispatch_p[1] - p2) <= 1.0
    assert sol.lmp_at(2) - sol.lmp_at(1) > 20.0
    assert sol.lmp_at(1) == pytest.approx(10.0, abs=0.5)
    assert sol.lmp_at(2) == pytest.approx(50.0, abs=0.5)


def test_shortage_returns_penalised_solution():
    net = Network(buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0)),
                  branches=(Branch(1, 2, 0.01, 0.05, s_rating=500.0),),
                  generators=(Generator(1, 0.0, 100.0, -100.0, 100.0, 0.0, 20.0, 0.01),),
                  loads=(LoadPoint(2, 150.0, 20.0),))
    sol = solve_acopf(net)
    assert sol.penalty_total > 0
    g = net.generators[0]
    assert g.p_min - 1e-6 <= sol.dispatch_p[0] <= g.p_max + 1e-6
    assert sol.unserved_p.sum() > 0


def test_no_penalty_iff_no_soft_violation():
    sol = solve_acopf(five_bus())
    assert sol.penalty_total == 0.0
    assert sol.voltage_violation.sum() == 0 and sol.branch_overload.sum() == 0
    short = solve_acopf(two_bus(2000.0, 0.0, x=0.05))
    assert short.penalty_total > 0


def test_equal_marginal_cost_without_binding_limits():
    net = Network(
        buses=(Bus(1, 138.0, "slack"), Bus(2, 138.0, "pv"), Bus(3, 138.0)),
        branches=(Branch(1, 2, 0.0, 0.05, s_rating=500.0), Branch(2, 3, 0.0, 0.05, s_rating=500.0),
                  Branch(1, 3, 0.0, 0.05, s_rating=500.0)),
        generators=(Generator(1, 0.0, 300.0, -200.0, 200.0, 0.0, 20.0, 0.02),
                    Generator(2, 0.0, 300.0, -200.0, 200.0, 0.0, 15.0, 0.05)),
        loads=(LoadPoint(3, 250.0, 30.0),),
    )
    sol = solve_acopf(net)
    mcs = [g.marginal_cost(p) for g, p in zip(net.generators, sol.dispatch_p) if 0 < p < g.p_max]
    assert len(mcs) == 2
    assert max(mcs) - min(mcs) <= 1e-3
    assert np.all(np.abs(sol.lmp - mcs[0]) <= 0.05 * mcs[0])


def _feasible_cost(net: Network, p_other, rng_q=None):
    trial = net.with_dispatch(np.r_[0.0, p_other])
    try:
        pf = solve_acpf(trial)
    except Exception:
        return None
    pd, _ = net.bus_demand()
    slack_p = pf.p_inj[0] + pd[0]
    g0 = net.generators[0]
    if not g0.p_min <= slack_p <= g0.p_max:
        return None
    if any(not b.v_min <= v <= b.v_max for b, v in zip(net.buses, pf.v_mag)):
        return None
    for br in net.branches:
        if br.s_rating > 0 and branch_flow(pf, br, net)[2] > br.s_rating:
            return None
    return g0.cost(slack_p) + sum(g.cost(p) for g, p in zip(net.generators[1:], p_other))


def test_objective_beats_random_feasible_dispatches():
    net = five_bus()
    sol = solve_acopf(net)
    rng = np.random.default_rng(11)
    found = 0
    while found < 100:
        p = [rng.uniform(g.p_min, g.p_max) for g in net.generators[1:]]
        cost = _feasible_cost(net, p)
        if cost is None:
            continue
        found += 1
        assert sol.total_cost <= cost + 1e-6


def test_heavier_penalty_does_not_increase_violation():
    net = congested_pair()
    base = OpfOptions()
    heavy = replace(base, branch_penalty=10 * base.branch_penalty, voltage_penalty=10 * base.voltage_penalty,
                    unserved_penalty=10 * base.unserved_penalty)
    a = solve_acopf(net, base)
    b = solve_acopf(net, heavy)
    assert b.branch_overload.sum() <= a.branch_overload.sum() + 1e-9
    assert b.voltage_violation.sum() <= a.voltage_violation.sum() + 1e-9


def test_highs_inner_solver_agrees():
    net = five_bus()
    a = solve_acopf(net)
    b = solve_acopf(net, OpfOptions(lp_method="highs"))
    assert a.objective == pytest.approx(b.objective, rel=1e-6)


def test_deterministic_repeat():
    a = solve_acopf(five_bus())
    b = solve_acopf(five_bus())
    assert np.array_equal(a.dispatch_p, b.dispatch_p) and np.array_equal(a.lmp, b.lmp)


def test_options_and_model_errors(tmp_path):
    with pytest.raises(ConfigError):
        OpfOptions.from_dict({"segmnts": 4})
    assert OpfOptions.from_dict({"segments": 4}).segments == 4
    with pytest.raises(ModelError):
        solve_acopf(Network(buses=(Bus(1, 69.0, "slack"),), loads=(LoadPoint(1, 5.0),)))
    net = five_bus()
    sol = solve_acopf(net)
    write_solution_csv(sol, net, tmp_path / "bus.csv", tmp_path / "branch.csv")
    assert (tmp_path / "bus.csv").read_text().splitlines()[0].startswith("bus")
    assert len((tmp_path / "branch.csv").read_text().splitlines()) == 7
