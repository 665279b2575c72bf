"""Dense two-phase simplex method with Bland's anti-cycling rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TOL = 1e-9


class LpError(RuntimeError):
    pass


class Infeasible(LpError):
    pass


class Unbounded(LpError):
    pass


@dataclass
class LpProblem:
    """maximize c.v  subject to  A_ub v <= b_ub,  A_eq v = b_eq.

    ``nonneg`` marks variables constrained to be >= 0; the others are free.
    Set ``maximize=False`` to minimize instead.
    """

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    nonneg: np.ndarray | None = None
    maximize: bool = True

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.A_ub = np.zeros((0, n)) if self.A_ub is None else np.asarray(self.A_ub, float).reshape(-1, n)
        self.b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, float).reshape(-1)
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, float).reshape(-1, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).reshape(-1)
        self.nonneg = np.zeros(n, bool) if self.nonneg is None else np.asarray(self.nonneg, bool)
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("constraint matrix and right-hand side sizes differ")


@dataclass
class LpSolution:
    value: float
    x: np.ndarray
    basis: list[int]  # basic columns of the standard-form tableau
    duals_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


class _Tableau:
    """Rows ``[A | b]`` for min c.x, Ax = b, x >= 0 with a maintained basis."""

    def __init__(self, A, b, basis):
        self.T = np.hstack([A, b[:, None]])
        self.basis = list(basis)
        self.iterations = 0

    def pivot(self, r, col):
        T = self.T
        T[r] /= T[r, col]
        colv = T[:, col].copy()
        colv[r] = 0.0
        T -= np.outer(colv, T[r])
        self.basis[r] = col
        self.iterations += 1

    def reduced_costs(self, c):
        cb = c[self.basis]
        return c - cb @ self.T[:, :-1]

    def run(self, c, allowed, max_iter=50_000):
        """Minimise c.x with Bland's rule over the columns flagged in ``allowed``."""
        for _ in range(max_iter):
            rc = self.reduced_costs(c)
            cand = np.flatnonzero((rc < -TOL) & allowed)
            if cand.size == 0:
                return
            col = cand[0]
            a = self.T[:, col]
            pos = a > TOL
            if not pos.any():
                raise Unbounded("objective is unbounded")
            ratios = np.full(a.shape, np.inf)
            ratios[pos] = self.T[pos, -1] / a[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + TOL * max(1.0, abs(best)))
            r = min(ties, key=lambda i: self.basis[i])
            self.pivot(r, col)
        raise LpError("simplex iteration limit reached")


def simplex_solve(lp: LpProblem) -> LpSolution:
    n = lp.c.size
    free = ~lp.nonneg
    # split free variables v = v+ - v-
    expand = np.hstack([np.eye(n), -np.eye(n)[:, free]])  # v = expand @ x
    n_x = expand.shape[1]
    m_ub, m_eq = lp.b_ub.size, lp.b_eq.size
    m = m_ub + m_eq
    A = np.zeros((m, n_x + m_ub))
    b = np.concatenate([lp.b_ub, lp.b_eq])
    A[:m_ub, :n_x] = lp.A_ub @ expand
    A[m_ub:, :n_x] = lp.A_eq @ expand
    A[np.arange(m_ub), n_x + np.arange(m_ub)] = 1.0
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    # rows whose slack stays +1 start basic on the slack; the rest get artificials
    basis = [-1] * m
    for i in range(m_ub):
        if sign[i] > 0:
            basis[i] = n_x + i
    art_rows = [i for i in range(m) if basis[i] < 0]
    n_std = A.shape[1]
    A_full = np.hstack([A, np.zeros((m, len(art_rows)))])
    for k, i in enumerate(art_rows):
        A_full[i, n_std + k] = 1.0
        basis[i] = n_std + k
    tab = _Tableau(A_full, b, basis)
    n_tot = A_full.shape[1]

    if art_rows:
        c1 = np.zeros(n_tot)
        c1[n_std:] = 1.0
        tab.run(c1, np.ones(n_tot, bool))
        if tab.T[:, -1] @ c1[tab.basis] > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
            raise Infeasible("constraints are infeasible")
        # drive remaining artificials out of the basis
        keep = []
        for r in range(m):
            if tab.basis[r] >= n_std:
                row = tab.T[r, :n_std]
                nz = np.flatnonzero(np.abs(row) > TOL)
                if nz.size:
                    tab.pivot(r, nz[0])
                    keep.append(r)
                # otherwise the row is redundant and is dropped below
            else:
                keep.append(r)
        tab.T = tab.T[keep]
        tab.basis = [tab.basis[r] for r in keep]
    tab.T = np.hstack([tab.T[:, :n_std], tab.T[:, -1:]])

    c_x = expand.T @ (-lp.c if lp.maximize else lp.c)
    c2 = np.concatenate([c_x, np.zeros(m_ub)])
    tab.run(c2, np.ones(n_std, bool))

    xs = np.zeros(n_std)
    xs[tab.basis] = tab.T[:, -1]
    v = expand @ xs[:n_x]
    value = float(lp.c @ v)
    # duals of the original rows (y_i >= 0 for <= rows of a maximisation)
    y = np.zeros(m)
    try:
        B = A[:, tab.basis] if len(tab.basis) == m else None
        if B is not None:
            y = np.linalg.solve(B.T, c2[tab.basis]) * sign
    except np.linalg.LinAlgError:
        pass
    if lp.maximize:
        y = -y
    return LpSolution(value, v, list(tab.basis), y[:m_ub], y[m_ub:], tab.iterations)
