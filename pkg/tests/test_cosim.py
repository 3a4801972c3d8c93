from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import random_feeder
from tdcosim.controller import McRule
from tdcosim.cosim import CosimCase, CosimOptions, converge_timestep, run_day
from tdcosim.errors import ModelError, NonConvergenceError
from tdcosim.feeder import Feeder, balanced_head_voltage, solve_feeder
from tdcosim.grid import Bus, Generator, LoadPoint, Network
from tdcosim.synthetic import make_feeders, make_transmission


def stiff_case(n_feeders=2):
    net = Network(buses=(Bus(1, 69.0, "slack", v_mag=1.02, is_boundary=True),),
                  generators=(Generator(1, 0.0, 500.0, -300.0, 300.0, 0.0, 20.0, 0.01),),
                  loads=(LoadPoint(1, 20.0, 5.0),))
    rng = np.random.default_rng(4)
    feeders = []
    for fid in range(1, n_feeders + 1):
        f = random_feeder(rng, 40, fid=fid)
        feeders.append(Feeder(fid, 1, f.head_node, f.base_kv, f.nodes, f.segments, f.transformers, f.loads))
    return net, feeders


@pytest.fixture(scope="module")
def small_case():
    net = make_transmission(n_bus=10, n_boundary=4, seed=3)
    feeders = make_feeders(net, n_nodes=40, seed=3)
    node_ev = {(f.id, nd.id): np.full(24, 30.0) for f in feeders for nd in f.nodes[3::10]}
    return CosimCase(net, feeders, node_ev)


def test_zero_load_feeders_leave_opf_unchanged():
    net, feeders = stiff_case()
    empty = [Feeder(f.id, f.head_bus, f.head_node, f.base_kv, f.nodes, f.segments, f.transformers)
             for f in feeders]
    res = converge_timestep(0, net, empty)
    assert res.rounds == 1
    assert res.opf.dispatch_p[0] == pytest.approx(20.0, abs=1e-6)
    assert all(r.p_mw == 0.0 and r.q_mvar == 0.0 for r in res.boundary)


def test_stiff_boundary_matches_decoupled_solve():
    net, feeders = stiff_case()
    res = converge_timestep(0, net, feeders)
    # the slack holds the boundary voltage, so feeders solved once at it are the answer
    direct = [solve_feeder(f, balanced_head_voltage(f, 1.02, 0.0)) for f in feeders]
    p_heads = math.fsum(d.head_power.sum().real for d in direct) / 1000.0
    q_heads = math.fsum(d.head_power.sum().imag for d in direct) / 1000.0
    (rec,) = res.boundary
    assert rec.v_mag == pytest.approx(1.02, abs=1e-9)
    assert rec.p_mw == pytest.approx(p_heads, abs=1e-9)
    assert rec.q_mvar == pytest.approx(q_heads, abs=1e-9)
    assert res.opf.dispatch_p[0] == pytest.approx(20.0 + p_heads, abs=1e-6)


def test_meshed_case_converges_within_tolerances(small_case):
    opts = CosimOptions()
    res = converge_timestep(18, small_case.hour_network(18), small_case.hour_feeders(18, {}), opts)
    assert res.rounds <= opts.max_rounds
    dp, dv = res.mismatch_trace[-1]
    assert dp <= opts.p_tol and dv <= opts.v_tol


def test_round_cap_reports_trace(small_case):
    opts = CosimOptions(max_rounds=1, p_tol=0.0, v_tol=0.0)
    with pytest.raises(NonConvergenceError) as info:
        converge_timestep(0, small_case.network, small_case.feeders, opts)
    assert len(info.value.trace) == 1


def test_no_ev_means_no_controller_action(small_case):
    case = CosimCase(small_case.network, small_case.feeders)
    day = run_day(case, hours=range(17, 20))
    assert all(h.actions == [] for h in day.hours)
    assert day.demanded_kwh == 0.0 and day.served_kwh == 0.0


def test_energy_accounting_and_determinism(small_case):
    hours = range(20, 24)
    # a zero price threshold forces actions without needing congestion
    rules = (McRule((0, 22), 0.0, 0.5, "delay"), McRule((23, 23), 0.0, 0.25, "shed"))
    a = run_day(small_case, mc_rules=rules, hours=hours)
    assert all(h.actions for h in a.hours)
    carry_out = a.hours[-1].ev_carry_out_kw
    assert a.demanded_kwh == pytest.approx(a.served_kwh + a.shed_kwh + carry_out, rel=1e-14)
    for prev, cur in zip(a.hours, a.hours[1:]):
        assert cur.ev_demand_kw == pytest.approx(30.0 * len(small_case.node_ev) + prev.ev_carry_out_kw, rel=1e-14)
    b = run_day(small_case, mc_rules=rules, hours=hours)
    assert [h.opf.objective for h in a.hours] == [h.opf.objective for h in b.hours]
    assert [h.opf.lmp.tolist() for h in a.hours] == [h.opf.lmp.tolist() for h in b.hours]


def test_case_validation(small_case):
    with pytest.raises(ModelError):
        CosimCase(small_case.network, small_case.feeders, {(999, 0): np.zeros(24)})
    with pytest.raises(ModelError):
        CosimCase(small_case.network, small_case.feeders, load_shape=np.ones(5))
    with pytest.raises(ModelError):
        CosimCase(small_case.network, small_case.feeders + small_case.feeders[:1])
