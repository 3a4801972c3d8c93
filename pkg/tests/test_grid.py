from __future__ import annotations

import numpy as np
import pytest

from oracles import five_bus, three_bus_triangle
from tdcosim.errors import ModelError
from tdcosim.grid import (
    Branch,
    Bus,
    Generator,
    LoadPoint,
    Network,
    build_admittance,
    from_matpower,
    load_case,
    network_from_dict,
    network_to_dict,
    save_case,
    validate_network,
)


def test_single_bus_admittance_is_zero():
    y = build_admittance(Network(buses=(Bus(1, 69.0, "slack"),)))
    assert y.toarray().shape == (1, 1)
    assert y.toarray()[0, 0] == 0


def test_one_line_admittance_sign_convention():
    net = Network(buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0)), branches=(Branch(1, 2, 0.0, 0.1),))
    np.testing.assert_allclose(build_admittance(net).toarray(), [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_triangle_matches_hand_accumulation():
    net = three_bus_triangle()
    want = np.zeros((3, 3), dtype=complex)
    pos = {1: 0, 2: 1, 3: 2}
    for br in net.branches:
        y = 1 / complex(br.r, br.x)
        i, k = pos[br.from_bus], pos[br.to_bus]
        want[i, i] += y + 0.5j * br.b_shunt
        want[k, k] += y + 0.5j * br.b_shunt
        want[i, k] -= y
        want[k, i] -= y
    np.testing.assert_allclose(build_admittance(net).toarray(), want, rtol=0, atol=1e-12)


def test_symmetry_and_zero_row_sums_without_shunts():
    net = three_bus_triangle()
    bare = Network(buses=net.buses, branches=tuple(Branch(b.from_bus, b.to_bus, b.r, b.x) for b in net.branches))
    Y = build_admittance(bare).toarray()
    assert np.array_equal(Y, Y.T)
    assert np.max(np.abs(Y.sum(axis=1))) <= 1e-12


def test_toggle_branch_is_bit_identical():
    net = five_bus()
    y0 = build_admittance(net).toarray()
    y1 = build_admittance(net.with_branch_status(2, False).with_branch_status(2, True)).toarray()
    assert np.array_equal(y0, y1)
    assert not np.array_equal(y0, build_admittance(net.with_branch_status(2, False)).toarray())


def test_zero_impedance_and_dangling_reference_raise():
    with pytest.raises(ModelError):
        build_admittance(Network(buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0)), branches=(Branch(1, 2, 0.0, 0.0),)))
    with pytest.raises(ModelError):
        build_admittance(Network(buses=(Bus(1, 69.0, "slack"),), branches=(Branch(1, 9, 0.0, 0.1),)))


def test_validate_clean_two_bus():
    net = Network(buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0)), branches=(Branch(1, 2, 0.0, 0.1),))
    rep = validate_network(net)
    assert rep.ok and rep.issues == []
    assert rep.islands == [[1, 2]]


def test_validate_reports_unserved_island_and_bounds():
    net = Network(
        buses=(Bus(1, 69.0, "slack"), Bus(2, 69.0), Bus(3, 69.0), Bus(4, 69.0)),
        branches=(Branch(1, 2, 0.0, 0.1), Branch(3, 4, 0.0, 0.1)),
        generators=(Generator(1, 50.0, 10.0),),
    )
    before = network_to_dict(net)
    rep = validate_network(net)
    assert any("3, 4" in i.message for i in rep.by_kind("island"))
    assert len(rep.by_kind("bounds")) == 1
    assert network_to_dict(net) == before


def test_case_roundtrip(tmp_path):
    net = five_bus()
    save_case(net, tmp_path / "case.json")
    back = load_case(tmp_path / "case.json")
    assert back == net
    assert network_from_dict(network_to_dict(net)) == net


def test_unknown_column_rejected():
    data = network_to_dict(five_bus())
    data["buses"][0]["colour"] = "red"
    with pytest.raises(ModelError):
        network_from_dict(data)


def test_ev_load_snapshot_is_new_object():
    net = five_bus()
    ev = net.with_ev_load({5: 12.0})
    assert net.bus_demand()[0][4] == pytest.approx(55.0)
    assert ev.bus_demand()[0][4] == pytest.approx(62.0)


MATPOWER_CASE = """
function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	138	1	1.1	0.9;
	2	1	90	30	0	19	1	1	0	138	1	1.1	0.9;
	3	2	0	0	0	0	1	1.01	0	138	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.02	100	1	250	10;
	3	60	0	300	-300	1.01	100	1	150	10;
];
mpc.branch = [
	1	2	0.01	0.085	0.176	250	250	250	0	0	1	-360	360;
	2	3	0.017	0.092	0.158	0	250	250	0	0	1	-360	360;
	1	3	0.039	0.17	0.358	150	150	150	0.97	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.11	5	150;
	2	0	0	3	0.085	1.2	600;
];
"""


def test_matpower_conversion_column_mapping():
    net = from_matpower(MATPOWER_CASE, "tiny")
    assert [b.kind for b in net.buses] == ["slack", "pq", "pv"]
    assert net.buses[0].v_mag == pytest.approx(1.02)
    assert net.loads == (LoadPoint(2, 90.0, 30.0),)
    assert net.shunts[0].bus == 2 and net.shunts[0].b == pytest.approx(19.0)
    g = net.generators[1]
    assert (g.bus, g.p_min, g.p_max, g.cost_a, g.cost_b, g.cost_c) == (3, 10.0, 150.0, 600.0, 1.2, 0.085)
    assert net.branches[2].tap == pytest.approx(0.97)
    assert net.branches[1].s_rating == 0.0
    assert validate_network(net).ok
