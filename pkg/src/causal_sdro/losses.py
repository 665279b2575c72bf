"""Application losses, decision maps and oracle losses.

Each application exposes

* ``decision(raw)``: map an unconstrained policy output to a feasible decision,
* ``loss(z, y)`` / ``loss_grad(z, y)``: the cost of decision ``z`` under outcome ``y``,
* ``value(raw, y)`` / ``grad(raw, y)``: the composition with the decision map,
  differentiated with respect to the raw output.

All functions broadcast over leading axes; the last axis indexes coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .simplex import LpError, LpProblem, simplex_solve


class ConvergenceError(RuntimeError):
    pass


def _pair(z, y):
    z, y = np.asarray(z, float), np.asarray(y, float)
    lead = np.broadcast_shapes(z.shape[:-1], y.shape[:-1])
    return np.broadcast_to(z, lead + z.shape[-1:]), np.broadcast_to(y, lead + y.shape[-1:])


class Application:
    name = "abstract"
    d_z: int  # raw policy output dimension
    d_y: int
    nonneg_decisions = False

    def decision(self, raw):
        return np.asarray(raw, float)

    def decision_vjp(self, raw, g):
        """Pull a gradient with respect to the decision back to the raw output."""
        return g

    def loss(self, z, y):
        raise NotImplementedError

    def loss_grad(self, z, y):
        raise NotImplementedError

    def value(self, raw, y):
        return self.loss(self.decision(raw), y)

    def grad(self, raw, y):
        raw, y = _pair(raw, y)
        return self.decision_vjp(raw, self.loss_grad(self.decision(raw), y))

    def oracle_loss(self, Y) -> float:
        raise NotImplementedError


# ---------------------------------------------------------------- newsvendor


@dataclass
class NewsvendorCosts:
    h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.h = np.atleast_1d(np.asarray(self.h, float))
        self.b = np.atleast_1d(np.asarray(self.b, float))
        if self.h.shape != self.b.shape or np.any(self.h <= 0) or np.any(self.b <= 0):
            raise ValueError("newsvendor costs must be positive and of equal length")


def newsvendor_loss(z, y, costs: NewsvendorCosts):
    z, y = _pair(z, y)
    return (costs.h * np.maximum(z - y, 0.0) + costs.b * np.maximum(y - z, 0.0)).sum(axis=-1)


def newsvendor_grad(z, y, costs: NewsvendorCosts):
    z, y = _pair(z, y)
    return costs.h * (z > y) - costs.b * (z < y)


class Newsvendor(Application):
    name = "newsvendor"
    nonneg_decisions = True

    def __init__(self, h=0.6, b=1.0):
        self.costs = NewsvendorCosts(h, b)
        self.d_z = self.d_y = self.costs.h.size

    def decision(self, raw):
        return np.maximum(np.asarray(raw, float), 0.0)

    def decision_vjp(self, raw, g):
        return g * (raw > 0)

    def loss(self, z, y):
        return newsvendor_loss(z, y, self.costs)

    def loss_grad(self, z, y):
        return newsvendor_grad(z, y, self.costs)

    def oracle_loss(self, Y) -> float:
        return 0.0


# ---------------------------------------------------------------- inventory


@dataclass
class InventoryCosts:
    c: np.ndarray
    h: np.ndarray
    b: np.ndarray
    S: np.ndarray  # substitution cost, +inf where product i cannot serve demand j

    def __post_init__(self):
        self.c, self.h, self.b = (np.asarray(v, float) for v in (self.c, self.h, self.b))
        self.S = np.asarray(self.S, float)
        d = self.h.size
        if self.S.shape != (d, d) or self.b.size != d or self.c.size != d:
            raise ValueError("inventory costs must share one dimension")
        if np.any(np.diag(self.S) != 0):
            raise ValueError("substitution cost of a product for itself must be 0")

    @classmethod
    def default(cls) -> "InventoryCosts":
        inf = np.inf
        return cls(c=np.zeros(3), h=np.array([1.0, 0.7, 0.6]), b=np.array([1.8, 1.6, 1.2]),
                   S=np.array([[0.0, 1.7, 2.0], [inf, 0.0, 1.5], [inf, inf, 0.0]]))

    def arcs(self):
        d = self.h.size
        return [(i, j) for i in range(d) for j in range(d) if np.isfinite(self.S[i, j])]


def _primal_lp(z, y, costs: InventoryCosts) -> LpProblem:
    d = costs.h.size
    arcs = costs.arcs()
    na = len(arcs)
    # variables: w (arcs), u (leftover), u' (shortage)
    cvec = np.concatenate([[costs.S[i, j] for i, j in arcs], costs.h, costs.b])
    A = np.zeros((2 * d, na + 2 * d))
    for a, (i, j) in enumerate(arcs):
        A[i, a] = 1.0
        A[d + j, a] = 1.0
    A[np.arange(d), na + np.arange(d)] = 1.0
    A[d + np.arange(d), na + d + np.arange(d)] = 1.0
    return LpProblem(cvec, A_eq=A, b_eq=np.concatenate([z, y]), nonneg=np.ones(cvec.size, bool),
                     maximize=False)


def _dual_lp(z, y, costs: InventoryCosts) -> LpProblem:
    d = costs.h.size
    arcs = costs.arcs()
    rows = [np.eye(2 * d)[k] for k in range(2 * d)]
    rhs = list(costs.h) + list(costs.b)
    for i, j in arcs:
        r = np.zeros(2 * d)
        r[i] = r[d + j] = 1.0
        rows.append(r)
        rhs.append(costs.S[i, j])
    return LpProblem(np.concatenate([z, y]), A_ub=np.array(rows), b_ub=np.array(rhs))


def inventory_primal(z, y, costs: InventoryCosts) -> float:
    """Minimum allocation cost of stock ``z`` against demand ``y`` (no purchase cost)."""
    z, y = np.asarray(z, float), np.asarray(y, float)
    if np.any(z < 0) or np.any(y < 0):
        raise ValueError("stock and demand must be non-negative")
    return simplex_solve(_primal_lp(z, y, costs)).value


def inventory_dual_solve(z, y, costs: InventoryCosts):
    """Return (value including c.z, gradient in z) from the recourse dual."""
    z, y = np.asarray(z, float), np.asarray(y, float)
    if np.any(z < 0) or np.any(y < 0):
        raise ValueError("stock and demand must be non-negative")
    try:
        sol = simplex_solve(_dual_lp(z, y, costs))
    except LpError as exc:
        raise RuntimeError(f"inventory recourse dual failed: {exc}") from exc
    d = costs.h.size
    return sol.value + float(costs.c @ z), sol.x[:d] + costs.c


def inventory_dual_loss(z, y, costs: InventoryCosts) -> float:
    return inventory_dual_solve(z, y, costs)[0]


def inventory_dual_grad_z(z, y, costs: InventoryCosts) -> np.ndarray:
    return inventory_dual_solve(z, y, costs)[1]


class Inventory(Application):
    """Multi-product inventory with downward substitution.

    Demands perturbed below zero are treated as zero demand.
    """

    name = "inventory"
    nonneg_decisions = True

    def __init__(self, costs: InventoryCosts | None = None):
        self.costs = InventoryCosts.default() if costs is None else costs
        self.d_z = self.d_y = self.costs.h.size

    def decision(self, raw):
        return np.maximum(np.asarray(raw, float), 0.0)

    def decision_vjp(self, raw, g):
        return g * (raw > 0)

    def _solve_all(self, z, y):
        z, y = _pair(z, y)
        lead = z.shape[:-1]
        zf = np.maximum(z.reshape(-1, self.d_z), 0.0)
        yf = np.maximum(y.reshape(-1, self.d_y), 0.0)
        vals = np.empty(zf.shape[0])
        grads = np.empty_like(zf)
        for n in range(zf.shape[0]):
            vals[n], grads[n] = inventory_dual_solve(zf[n], yf[n], self.costs)
        return vals.reshape(lead), grads.reshape(lead + (self.d_z,))

    def loss(self, z, y):
        return self._solve_all(z, y)[0]

    def loss_grad(self, z, y):
        return self._solve_all(z, y)[1]

    def value_and_grad(self, raw, y):
        raw, y = _pair(raw, y)
        v, g = self._solve_all(self.decision(raw), y)
        return v, self.decision_vjp(raw, g)

    def grad(self, raw, y):
        return self.value_and_grad(raw, y)[1]

    def oracle_loss(self, Y) -> float:
        """Mean over outcomes of the best cost with perfect foresight."""
        Y = np.atleast_2d(np.asarray(Y, float))
        if not np.any(self.costs.c):
            return 0.0
        d = self.d_z
        total = 0.0
        for y in Y:
            # joint LP over (z, w, u, u') with z as free stock
            base = _primal_lp(np.zeros(d), y, self.costs)
            n_inner = base.c.size
            A = np.hstack([np.zeros((2 * d, d)), base.A_eq])
            A[np.arange(d), np.arange(d)] = -1.0
            lp = LpProblem(np.concatenate([self.costs.c, base.c]), A_eq=A, b_eq=np.concatenate([np.zeros(d), y]),
                           nonneg=np.ones(d + n_inner, bool), maximize=False)
            total += simplex_solve(lp).value
        return total / len(Y)


# ---------------------------------------------------------------- portfolio


@dataclass
class PortfolioParams:
    omega: float = 5.0
    d_y: int = 2

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("omega must be positive")


def portfolio_loss(z, y, params: PortfolioParams):
    z, y = _pair(z, y)
    ret = (y * z[..., 1:]).sum(axis=-1)
    return -params.omega * ret + (ret - z[..., 0]) ** 2


def portfolio_grad(z, y, params: PortfolioParams):
    z, y = _pair(z, y)
    dev = (y * z[..., 1:]).sum(axis=-1, keepdims=True) - z[..., :1]
    return np.concatenate([-2 * dev, (-params.omega + 2 * dev) * y], axis=-1)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def pt_weights(Y, omega: float, tol: float = 1e-10, max_iter: int = 200_000):
    """Best fixed portfolio in hindsight over the return window ``Y``.

    The free level z0 is set to the mean portfolio return, which leaves
    ``-omega * mean(Yw) + var(Yw)`` to minimise over the simplex.
    Returns ``(z, loss)`` with ``z = (z0, w)``.
    """
    Y = np.atleast_2d(np.asarray(Y, float))
    mu = Y.mean(axis=0)
    cov = np.cov(Y, rowvar=False, bias=True).reshape(Y.shape[1], Y.shape[1])
    step = 1.0 / max(2 * np.linalg.eigvalsh(cov).max(), 1e-12)
    w = np.full(Y.shape[1], 1.0 / Y.shape[1])
    for _ in range(max_iter):
        g = -omega * mu + 2 * cov @ w
        w_new = project_simplex(w - step * g)
        if np.linalg.norm(w_new - w) / step <= tol:
            w = w_new
            break
        w = w_new
    else:
        raise ConvergenceError("projected gradient did not reach the stationarity tolerance")
    z = np.concatenate([[float((Y @ w).mean())], w])
    return z, float(portfolio_loss(z, Y, PortfolioParams(omega, Y.shape[1])).mean())


class Portfolio(Application):
    """Mean-variance style portfolio loss; raw outputs are (z0, logits)."""

    name = "portfolio"

    def __init__(self, d_y: int, omega: float = 5.0):
        self.params = PortfolioParams(omega, d_y)
        self.d_y = d_y
        self.d_z = d_y + 1

    def decision(self, raw):
        raw = np.asarray(raw, float)
        return np.concatenate([raw[..., :1], softmax(raw[..., 1:], axis=-1)], axis=-1)

    def decision_vjp(self, raw, g):
        w = softmax(raw[..., 1:], axis=-1)
        gw = g[..., 1:]
        return np.concatenate([g[..., :1], w * (gw - (w * gw).sum(axis=-1, keepdims=True))], axis=-1)

    def loss(self, z, y):
        return portfolio_loss(z, y, self.params)

    def loss_grad(self, z, y):
        return portfolio_grad(z, y, self.params)

    def oracle_loss(self, Y) -> float:
        return pt_weights(Y, self.params.omega)[1]


# ---------------------------------------------------------------- simple losses


class Quadratic(Application):
    """Squared distance between decision and outcome (identity decision map)."""

    name = "quadratic"

    def __init__(self, d: int = 1):
        self.d_z = self.d_y = d

    def loss(self, z, y):
        z, y = _pair(z, y)
        return ((z - y) ** 2).sum(axis=-1)

    def loss_grad(self, z, y):
        z, y = _pair(z, y)
        return 2 * (z - y)

    def oracle_loss(self, Y) -> float:
        return 0.0


@dataclass
class Constant(Application):
    """Loss that ignores the decision; used to check objective identities."""

    c: float = 1.0
    d_z: int = 1
    d_y: int = 1
    name: str = field(default="constant", init=False)

    def loss(self, z, y):
        z, y = _pair(z, y)
        return np.full(z.shape[:-1], float(self.c))

    def loss_grad(self, z, y):
        z, y = _pair(z, y)
        return np.zeros(z.shape)

    def oracle_loss(self, Y) -> float:
        return float(self.c)


def make_application(name: str, d_y: int, **kw) -> Application:
    if name == "newsvendor":
        return Newsvendor(kw.get("h", 0.6), kw.get("b", 1.0))
    if name == "inventory":
        return Inventory(kw.get("costs"))
    if name == "portfolio":
        return Portfolio(d_y, kw.get("omega", 5.0))
    if name == "quadratic":
        return Quadratic(d_y)
    raise ValueError(f"unknown application {name!r}")
