"""Dense bounded-variable simplex for the inner LPs of the OPF loop.

Problem form::

    minimize    c @ x
    subject to  A[i] @ x  (<=, >=, =)  rhs[i]
                lb <= x <= ub

``lb`` must be finite; ``ub`` may be ``inf``.  Duals follow the sensitivity
convention ``duals[i] = d(objective) / d(rhs[i])`` so that a binding ``>=``
row of a minimization has a non-negative dual and a binding ``<=`` row a
non-positive one.  Reduced costs are ``c - A.T @ duals``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from tdcosim.errors import ModelError, NumericalError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_SENSES = ("<", ">", "=")


@dataclass
class LpProblem:
    costs: np.ndarray
    rows: sp.spmatrix | np.ndarray
    senses: list[str]
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=float)
        n = self.costs.size
        if sp.issparse(self.rows):
            self.rows = self.rows.tocsr()
        else:
            self.rows = sp.csr_matrix(np.atleast_2d(np.asarray(self.rows, dtype=float)).reshape(-1, n))
        self.rhs = np.asarray(self.rhs, dtype=float).ravel()
        self.senses = list(self.senses)
        self.lb = np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.asarray(self.ub, dtype=float).ravel()
        m = self.rhs.size
        if self.rows.shape != (m, n) or len(self.senses) != m:
            raise ModelError(f"inconsistent LP dimensions: rows {self.rows.shape}, rhs {m}, costs {n}")
        if self.lb.size != n or self.ub.size != n:
            raise ModelError("variable bound vectors must match the cost vector")
        if any(s not in _SENSES for s in self.senses):
            raise ModelError(f"row senses must be one of {_SENSES}")
        if not np.all(np.isfinite(self.lb)):
            raise ModelError("lower bounds must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


@dataclass
class LpResult:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    objective: float = float("nan")
    pivots: int = 0

    def dual_objective(self, problem: LpProblem) -> float:
        """Objective of the dual LP evaluated at the returned multipliers."""
        val = float(self.duals @ problem.rhs)
        d = self.reduced_costs
        at_upper = (d < 0) & np.isfinite(problem.ub)
        val += float(d[~at_upper] @ problem.lb[~at_upper])
        val += float(d[at_upper] @ problem.ub[at_upper])
        return val


class _Tableau:
    """Bounded-variable simplex tableau over standard form ``A x = b``."""

    def __init__(self, A, b, ub, eps=1e-9):
        m, n = A.shape
        self.m, self.n = m, n
        self.eps = eps
        self.piv_tol = 1e-7
        self.T = np.zeros((m, n + m))
        sign = np.where(b < 0, -1.0, 1.0)
        self.T[:, :n] = A * sign[:, None]
        self.T[:, n:] = np.eye(m)
        self.A0 = self.T.copy()
        self.b0 = b * sign
        self.beta = self.b0.copy()  # values of basic variables
        self.ub = np.concatenate([ub, np.full(m, np.inf)])
        self.basis = np.arange(n, n + m)
        self.at_upper = np.zeros(n + m, dtype=bool)
        self.pivots = 0

    def run(self, cost, allowed, max_pivots):
        """Optimize ``cost`` over columns in ``allowed``.  Returns status."""
        T, eps = self.T, self.eps
        cb = cost[self.basis]
        red = cost - cb @ T
        degenerate = 0
        bland = False
        refreshed = 0
        while True:
            in_basis = np.zeros(T.shape[1], dtype=bool)
            in_basis[self.basis] = True
            cand_lo = allowed & ~in_basis & ~self.at_upper & (red < -eps)
            cand_up = allowed & ~in_basis & self.at_upper & (red > eps)
            cand = cand_lo | cand_up
            if not cand.any():
                # confirm optimality against a fresh factorization; the
                # incremental updates drift on badly scaled rows
                if refreshed >= 3 or not self.refresh():
                    return OPTIMAL
                refreshed += 1
                T = self.T
                red = cost - cost[self.basis] @ T
                continue
            if self.pivots >= max_pivots:
                raise NumericalError(f"simplex cycling guard tripped after {self.pivots} pivots")
            if bland:
                j = int(np.flatnonzero(cand)[0])
            else:
                score = np.where(cand, np.abs(red), -1.0)
                j = int(np.argmax(score))
            direction = -1.0 if self.at_upper[j] else 1.0
            col = T[:, j] * direction
            # basic values move by -t * col as the entering variable moves by t
            t_best = self.ub[j]
            leave, leave_to_upper = -1, False
            ratios = np.full(self.m, np.inf)
            to_upper = np.zeros(self.m, dtype=bool)
            pos = col > self.piv_tol
            ratios[pos] = np.maximum(self.beta[pos], 0.0) / col[pos]
            ub_b = self.ub[self.basis]
            neg = (col < -self.piv_tol) & np.isfinite(ub_b)
            ratios[neg] = np.maximum(ub_b[neg] - self.beta[neg], 0.0) / (-col[neg])
            to_upper[neg] = True
            if np.isfinite(ratios).any():
                best = ratios.min()
                if best < t_best:
                    if bland:
                        r = _first_min(ratios, self.basis)
                    else:
                        # among near-ties take the largest pivot element
                        ties = np.flatnonzero(ratios <= best + eps)
                        r = int(ties[np.argmax(np.abs(col[ties]))])
                    t_best, leave, leave_to_upper = best, r, bool(to_upper[r])
            if not np.isfinite(t_best):
                return UNBOUNDED
            t_best = max(t_best, 0.0)
            self.pivots += 1
            if t_best <= eps:
                degenerate += 1
                if degenerate > 50:
                    bland = True
            else:
                degenerate = 0
            self.beta -= t_best * col
            if leave < 0:
                # bound flip, basis unchanged
                self.at_upper[j] = not self.at_upper[j]
                continue
            entering_value = (self.ub[j] - t_best) if self.at_upper[j] else t_best
            old = self.basis[leave]
            self.at_upper[old] = leave_to_upper
            self.at_upper[j] = False
            self._pivot(leave, j)
            self.beta[leave] = entering_value
            red = red - red[j] * T[leave]
            red[j] = 0.0

    def refresh(self) -> bool:
        """Rebuild the tableau from the original rows; False if the basis is singular."""
        B = self.A0[:, self.basis]
        try:
            binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            return False
        self.T = binv @ self.A0
        xn = np.where(self.at_upper, self.ub, 0.0)
        xn[self.basis] = 0.0
        xn[~np.isfinite(xn)] = 0.0
        self.beta = binv @ (self.b0 - self.A0 @ xn)
        return True

    def _pivot(self, r, j):
        T = self.T
        piv = T[r, j]
        T[r] /= piv
        colj = T[:, j].copy()
        colj[r] = 0.0
        nz = np.flatnonzero(np.abs(colj) > 1e-15)
        if nz.size:
            T[nz] -= np.outer(colj[nz], T[r])
        self.basis[r] = j


def _first_min(ratios, basis):
    best = ratios.min()
    ties = np.flatnonzero(ratios <= best + 1e-12)
    return int(ties[np.argmin(basis[ties])])


def _simplex(problem: LpProblem, max_pivots: int | None) -> LpResult:
    A_orig = problem.rows.toarray()
    m, n = A_orig.shape
    lb, ub = problem.lb, problem.ub
    c = problem.costs

    if np.any(lb > ub + 1e-12):
        return LpResult(status=INFEASIBLE)

    # shift to 0 <= x' <= ub - lb and add one slack per inequality row
    rhs = problem.rhs - A_orig @ lb
    slack_cols = [i for i, s in enumerate(problem.senses) if s != "="]
    ns = len(slack_cols)
    A = np.zeros((m, n + ns))
    A[:, :n] = A_orig
    for k, i in enumerate(slack_cols):
        A[i, n + k] = 1.0 if problem.senses[i] == "<" else -1.0
    width = np.concatenate([ub - lb, np.full(ns, np.inf)])
    cost = np.concatenate([c, np.zeros(ns)])

    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    tab = _Tableau(A, rhs, width)
    nt = n + ns
    if max_pivots is None:
        max_pivots = 50 * (m + nt) + 1000

    # phase 1: drive artificials to zero
    phase1 = np.zeros(nt + m)
    phase1[nt:] = 1.0
    allowed = np.ones(nt + m, dtype=bool)
    tab.run(phase1, allowed, max_pivots)
    infeas = float(tab.beta[tab.basis >= nt].sum())
    if infeas > 1e-7 * max(1.0, scale, float(np.abs(rhs).max(initial=0.0))):
        return LpResult(status=INFEASIBLE, pivots=tab.pivots)

    # pivot zero-valued artificials out of the basis where possible
    for r in range(m):
        if tab.basis[r] >= nt:
            row = tab.T[r, :nt]
            cand = np.flatnonzero(np.abs(row) > 1e-9)
            if cand.size:
                tab._pivot(r, int(cand[np.argmax(np.abs(row[cand]))]))
    tab.ub[nt:] = 0.0
    tab.beta[tab.basis >= nt] = 0.0

    phase2 = np.concatenate([cost, np.zeros(m)])
    allowed = np.zeros(nt + m, dtype=bool)
    allowed[:nt] = True
    status = tab.run(phase2, allowed, max_pivots)
    if status == UNBOUNDED:
        return LpResult(status=UNBOUNDED, pivots=tab.pivots)

    xs = np.where(tab.at_upper, tab.ub, 0.0)
    xs[:nt][~np.isfinite(xs[:nt])] = 0.0
    xs[tab.basis] = tab.beta
    x = lb + xs[:n]

    # duals from the final basis: B.T y = c_B (artificial columns are unit vectors
    # on the sign-normalized rows)
    sign = np.where(rhs < 0, -1.0, 1.0)
    Afull = np.hstack([A, np.diag(sign)])
    cfull = np.concatenate([cost, np.zeros(m)])
    B = Afull[:, tab.basis]
    try:
        y = np.linalg.solve(B.T, cfull[tab.basis])
    except np.linalg.LinAlgError:
        y = np.linalg.lstsq(B.T, cfull[tab.basis], rcond=None)[0]
    red = c - A_orig.T @ y
    return LpResult(status=OPTIMAL, x=x, duals=y, reduced_costs=red,
                    objective=float(c @ x), pivots=tab.pivots)


def _highs(problem: LpProblem) -> LpResult:
    from scipy.optimize import linprog

    A = problem.rows
    senses = np.array(problem.senses)
    le = senses == "<"
    ge = senses == ">"
    eq = senses == "="
    A_ub = sp.vstack([A[le], -A[ge]]).tocsr() if (le.any() or ge.any()) else None
    b_ub = np.concatenate([problem.rhs[le], -problem.rhs[ge]]) if A_ub is not None else None
    A_eq = A[eq] if eq.any() else None
    b_eq = problem.rhs[eq] if eq.any() else None
    bounds = list(zip(problem.lb, [None if not np.isfinite(u) else u for u in problem.ub]))
    res = linprog(problem.costs, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 4:
        # HiGHS sometimes ends with an unknown model status after presolve; retry without it
        res = linprog(problem.costs, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=bounds, method="highs", options={"presolve": False})
    if res.status == 2:
        return LpResult(status=INFEASIBLE)
    if res.status == 3:
        return LpResult(status=UNBOUNDED)
    if res.status != 0:
        raise NumericalError(f"HiGHS failed: {res.message}")
    y = np.zeros(problem.rhs.size)
    n_le = int(le.sum())
    if A_ub is not None:
        marg = res.ineqlin.marginals
        y[le] = marg[:n_le]
        y[ge] = -marg[n_le:]
    if A_eq is not None:
        y[eq] = res.eqlin.marginals
    red = problem.costs - A.T @ y
    return LpResult(status=OPTIMAL, x=np.asarray(res.x), duals=y, reduced_costs=red,
                    objective=float(res.fun), pivots=int(res.nit))


def solve_lp(problem: LpProblem, method: str = "simplex", max_pivots: int | None = None) -> LpResult:
    """Solve ``problem``.

    ``method="simplex"`` runs the in-house dense bounded simplex (Dantzig
    pricing with a Bland fallback on degenerate stalls); ``"highs"`` delegates
    to SciPy's HiGHS.  Both return the same :class:`LpResult` layout.

    Raises:
        NumericalError: the pivot cap was reached (suspected cycling).
    """
    if method == "simplex":
        return _simplex(problem, max_pivots)
    if method == "highs":
        return _highs(problem)
    raise ValueError(f"unknown LP method {method!r}")
