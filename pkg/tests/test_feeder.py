from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import bisect, line_feeder, random_feeder
from tdcosim.errors import NonConvergenceError, StalenessError, TopologyError
from tdcosim.feeder import (
    DistSolution,
    Feeder,
    FeederNode,
    PhaseLoad,
    Segment,
    Transformer,
    aggregate_boundary,
    balanced_head_voltage,
    feeder_overloads,
    load_feeder,
    save_feeder,
    solve_feeder,
)

Z_FULL = (complex(0.4, 0.9), complex(0.1, 0.4), complex(0.1, 0.35),
          complex(0.42, 0.88), complex(0.1, 0.38), complex(0.41, 0.92))


def test_zero_load_reproduces_head_voltage():
    f = random_feeder(np.random.default_rng(1), 80)
    f = Feeder(f.id, f.head_bus, f.head_node, f.base_kv, f.nodes, f.segments)
    vh = balanced_head_voltage(f, 1.03, 0.1)
    sol = solve_feeder(f, vh)
    mask = np.array([[ph in nd.phases for ph in "ABC"] for nd in f.nodes])
    assert np.array_equal(sol.voltages[mask], np.tile(vh, (len(f.nodes), 1))[mask])
    assert sol.losses == 0 and sol.iterations == 1


def test_balanced_segment_matches_scalar_oracle():
    z = complex(0.6, 1.2)
    f = Feeder(1, 1, 0, 12.47, (FeederNode(0), FeederNode(1)), (Segment(0, 1, (z, 0j, 0j, z, 0j, z)),),
               loads=tuple(PhaseLoad(1, ph, 900.0, 300.0) for ph in "ABC"))
    sol = solve_feeder(f, tol=1e-12)
    v1 = f.v_base
    p, q = 900e3, 300e3
    # |V2|^4 + (2(RP + XQ) - |V1|^2)|V2|^2 + |z|^2 |S|^2 = 0, high-voltage root
    b = 2 * (z.real * p + z.imag * q) - v1 * v1
    c = abs(z) ** 2 * (p * p + q * q)
    u = bisect(lambda u: u * u + b * u + c, v1 * v1 / 2, v1 * v1)
    np.testing.assert_allclose(np.abs(sol.voltages[1]), math.sqrt(u), rtol=1e-9)


def test_single_phase_load_dense_hand_evaluation():
    f = Feeder(1, 1, 0, 12.47, (FeederNode(0), FeederNode(1), FeederNode(2, "A")),
               (Segment(0, 1, Z_FULL), Segment(1, 2, (complex(0.3, 0.5), 0j, 0j, 0j, 0j, 0j))),
               loads=(PhaseLoad(2, "A", 400.0, 100.0),))
    vh = balanced_head_voltage(f)
    sol = solve_feeder(f, vh, tol=1e-13)
    # dense oracle: iterate the two-segment equations with explicit 3x3 matrices
    z1 = np.array([[Z_FULL[0], Z_FULL[1], Z_FULL[2]], [Z_FULL[1], Z_FULL[3], Z_FULL[4]],
                   [Z_FULL[2], Z_FULL[4], Z_FULL[5]]])
    z2 = complex(0.3, 0.5)
    v1, v2 = vh.copy(), vh[0]
    for _ in range(200):
        i = np.conj(400e3 + 100e3j) / np.conj(v2)
        cur = np.array([i, 0, 0])
        v1 = vh - z1 @ cur
        v2 = v1[0] - z2 * i
    np.testing.assert_allclose(sol.voltages[1], v1, rtol=1e-10)
    assert abs(sol.voltages[2][0] - v2) / abs(v2) < 1e-10
    assert np.all(sol.edge_currents[:, 1:] == 0)
    # mutual coupling shows up as a drop on the unloaded phases
    assert np.all(np.abs(sol.voltages[1][1:] - vh[1:]) > 0)


def test_overload_list_and_ratio():
    f = Feeder(1, 1, 0, 12.47, (FeederNode(0), FeederNode(1)),
               (Segment(0, 1, Z_FULL, rating_a=100.0, name="s1"),))
    quiet = DistSolution(1, (0, 1), np.ones((2, 3), complex), np.array([[50, 0, 0]], complex), np.zeros(3),
                         np.zeros(3), 0j, True, 1, 0.0)
    assert feeder_overloads(quiet, f) == []
    hot = DistSolution(1, (0, 1), np.ones((2, 3), complex), np.array([[150, 10, 0]], complex), np.zeros(3),
                       np.zeros(3), 0j, True, 1, 0.0)
    (ov,) = feeder_overloads(hot, f)
    assert ov.ratio == pytest.approx(1.5) and ov.element == "segment"


def test_overload_count_monotone_in_ev_load():
    base = line_feeder(12, kw=20.0)
    tr = Transformer(11, 12, (1.0, 1.0, 1.0), (0.05j, 0.05j, 0.05j), rating_kva=300.0)
    nodes = base.nodes + (FeederNode(12),)
    segs = tuple(Segment(s.from_node, s.to_node, s.z, rating_a=60.0) for s in base.segments)
    f = Feeder(1, 1, 0, 12.47, nodes, segs, (tr,), base.loads)
    counts = []
    for step in np.linspace(0, 600.0, 7):
        g = f.with_ev_loads([(12, ph, step / 3) for ph in "ABC"])
        counts.append(len(feeder_overloads(solve_feeder(g), g)))
    assert counts == sorted(counts)
    assert counts[-1] > counts[0]


def _fake(head_kva, fid=1):
    return DistSolution(fid, (0,), np.ones((1, 3), complex), np.zeros((0, 3), complex),
                        np.array([1, np.exp(-2j * np.pi / 3), np.exp(2j * np.pi / 3)]),
                        np.full(3, head_kva), 0j, True, 1, 0.0)


def test_aggregate_sums_phases_and_feeders():
    out = aggregate_boundary({1: _fake(2000 + 1000j)}, {1: 7})
    assert (out[7].p_mw, out[7].q_mvar) == pytest.approx((6.0, 3.0))
    assert out[7].unbalance == pytest.approx(0.0, abs=1e-12)
    two = aggregate_boundary({1: _fake(2000 + 1000j), 2: _fake(500 + 100j, 2)}, {1: 7, 2: 7})
    assert (two[7].p_mw, two[7].q_mvar) == pytest.approx((7.5, 3.3))
    with pytest.raises(StalenessError):
        aggregate_boundary({1: _fake(1 + 0j)}, {1: 7, 2: 7})


def test_boundary_covers_loads_on_random_feeders():
    rng = np.random.default_rng(5)
    sols, smap, loads = {}, {}, {}
    for fid in range(6):
        f = random_feeder(rng, 60, fid=fid)
        sols[fid] = solve_feeder(f)
        smap[fid] = 100 + fid % 2
        loads[smap[fid]] = loads.get(smap[fid], 0.0) + f.total_load().real / 1000.0
    out = aggregate_boundary(sols, smap)
    for bus, bp in out.items():
        assert bp.p_mw >= loads[bus]


def test_conservation_and_nonnegative_losses():
    rng = np.random.default_rng(9)
    for _ in range(10):
        f = random_feeder(rng, int(rng.integers(10, 300)))
        sol = solve_feeder(f)
        assert sol.loss_kw >= 0
        resid = sol.head_power.sum() - f.total_load() - sol.losses
        assert abs(resid) / 1000.0 <= 1e-6


def test_voltage_non_increasing_along_uniform_line():
    sol = solve_feeder(line_feeder(30))
    mags = np.abs(sol.voltages[:, 0])
    assert np.all(np.diff(mags) <= 1e-12)


def test_doubling_load_increases_losses():
    f = random_feeder(np.random.default_rng(2), 120)
    assert solve_feeder(f.scaled(2.0)).loss_kw >= solve_feeder(f).loss_kw


def test_repeat_is_bit_identical():
    f = random_feeder(np.random.default_rng(4), 150)
    a, b = solve_feeder(f), solve_feeder(f)
    assert np.array_equal(a.voltages, b.voltages) and np.array_equal(a.head_power, b.head_power)


def test_transformer_ratio_at_no_load():
    f = Feeder(1, 1, 0, 12.47, (FeederNode(0), FeederNode(1)), (),
               (Transformer(0, 1, (12.47 / 0.48, 12.47 / 0.48, 12.47 / 0.48), (0.01j,) * 3),))
    sol = solve_feeder(f)
    np.testing.assert_allclose(np.abs(sol.voltages[1]), f.v_base * 0.48 / 12.47, rtol=1e-12)


def test_cycle_and_divergence():
    nodes = (FeederNode(0), FeederNode(1), FeederNode(2))
    loop = Feeder(1, 1, 0, 12.47, nodes, (Segment(0, 1, Z_FULL), Segment(1, 2, Z_FULL), Segment(2, 1, Z_FULL)))
    with pytest.raises(TopologyError):
        solve_feeder(loop)
    heavy = line_feeder(5, z_self=complex(5.0, 10.0), kw=20000.0)
    with pytest.raises(NonConvergenceError):
        solve_feeder(heavy)


def test_file_roundtrip(tmp_path):
    f = random_feeder(np.random.default_rng(3), 25)
    save_feeder(f, tmp_path / "f.json")
    assert load_feeder(tmp_path / "f.json") == f
