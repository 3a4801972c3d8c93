from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lp_vertex_oracle
from tdcosim.errors import ModelError, NumericalError
from tdcosim.lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LpProblem, solve_lp


def test_single_bound_row():
    prob = LpProblem([1.0], [[1.0]], [">"], [3.0], [0.0], [np.inf])
    res = solve_lp(prob)
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(3.0)
    assert res.duals[0] == pytest.approx(1.0)


def test_two_variable_textbook():
    prob = LpProblem([2.0, 3.0], [[1.0, 1.0], [1.0, 0.0]], [">", "<"], [10.0, 4.0], [0.0, 0.0], [np.inf, np.inf])
    res = solve_lp(prob)
    np.testing.assert_allclose(res.x, [4.0, 6.0], atol=1e-12)
    assert res.objective == pytest.approx(26.0)
    want, _ = lp_vertex_oracle([2, 3], [[1, 1], [1, 0]], [">", "<"], [10, 4], np.zeros(2), np.full(2, 1e6))
    assert res.objective == pytest.approx(want)


def test_contradiction_is_infeasible():
    prob = LpProblem([1.0], [[1.0], [1.0]], [">", "<"], [2.0, 1.0], [0.0], [np.inf])
    assert solve_lp(prob).status == INFEASIBLE


def test_unbounded_detected():
    prob = LpProblem([-1.0, 0.0], [[1.0, -1.0]], ["<"], [1.0], [0.0, 0.0], [np.inf, np.inf])
    assert solve_lp(prob).status == UNBOUNDED


def test_dimension_checks():
    with pytest.raises(ModelError):
        LpProblem([1.0, 2.0], [[1.0, 1.0]], [">", "<"], [1.0], [0, 0], [1, 1])
    with pytest.raises(ModelError):
        LpProblem([1.0], [[1.0]], ["!"], [1.0], [0], [1])
    with pytest.raises(ModelError):
        LpProblem([1.0], [[1.0]], [">"], [1.0], [-np.inf], [1])


def test_pivot_cap_raises():
    rng = np.random.default_rng(3)
    A = rng.random((8, 6))
    prob = LpProblem(-rng.random(6), A, ["<"] * 8, np.ones(8), np.zeros(6), np.full(6, np.inf))
    with pytest.raises(NumericalError):
        solve_lp(prob, max_pivots=1)


def _random_lp(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    m = int(rng.integers(1, 4))
    A = np.round(rng.uniform(-3, 3, (m, n)), 1)
    senses = [["<", ">", "="][int(k)] for k in rng.integers(0, 3, m)]
    x0 = rng.uniform(0, 4, n)
    rhs = A @ x0 + np.where(np.array(senses) == "<", 1.0, np.where(np.array(senses) == ">", -1.0, 0.0))
    c = np.round(rng.uniform(-5, 5, n), 1)
    lb = np.zeros(n)
    ub = np.full(n, 6.0)
    return c, A, senses, rhs, lb, ub


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000))
def test_matches_vertex_enumeration(seed):
    c, A, senses, rhs, lb, ub = _random_lp(seed)
    want, _ = lp_vertex_oracle(c, A, senses, rhs, lb, ub)
    res = solve_lp(LpProblem(c, A, senses, rhs, lb, ub))
    assert want is not None
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(want, abs=1e-8)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10_000))
def test_strong_duality_and_highs_agreement(seed):
    c, A, senses, rhs, lb, ub = _random_lp(seed)
    prob = LpProblem(c, A, senses, rhs, lb, ub)
    res = solve_lp(prob)
    assert abs(res.objective - res.dual_objective(prob)) <= 1e-9 * max(1.0, abs(res.objective))
    ref = solve_lp(prob, method="highs")
    assert res.objective == pytest.approx(ref.objective, abs=1e-7)


def test_dual_signs_follow_sensitivity_convention():
    # binding >= row: positive dual; binding <= row: non-positive dual
    prob = LpProblem([1.0, 1.0], [[1.0, 2.0], [1.0, 0.0]], [">", "<"], [4.0, 1.0], [0, 0], [np.inf, np.inf])
    res = solve_lp(prob)
    assert res.duals[0] > 0 and res.duals[1] <= 0
    eps = 1e-3
    bumped = LpProblem([1.0, 1.0], [[1.0, 2.0], [1.0, 0.0]], [">", "<"], [4.0 + eps, 1.0], [0, 0],
                       [np.inf, np.inf])
    assert (solve_lp(bumped).objective - res.objective) / eps == pytest.approx(res.duals[0], rel=1e-6)
