"""Worst-case distributions on 1-D grids and the hard-constraint dual search.

Densities are taken with respect to Lebesgue measure. Every normaliser is a
trapezoid integral on the caller's grid evaluated in log space, so a density
integrates to one on that grid by construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .data import Dataset, GroupedDataset
from .kernels import SinkhornConfig, rho_bar
from .losses import Application
from .objective import make_saa_batch, saa_objective
from .policies import DecisionRule

DRIFT_TOL = 1e-2
COVER_SD = 6.0
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class GridError(ValueError):
    """The grid is too coarse for its quadrature to be trusted."""


class InfeasibleError(ValueError):
    """The radius is too small for the entropic ball to contain any distribution."""


@dataclass
class WorstCaseGrid:
    x_grid: np.ndarray
    y_grid: np.ndarray
    density: np.ndarray  # (G_x, G_y)
    model: str

    def integral(self) -> float:
        return float(trapezoid_weights(self.x_grid) @ self.density @ trapezoid_weights(self.y_grid))

    def rows(self):
        """(x, y, density) triples in row-major grid order."""
        for i, x in enumerate(self.x_grid):
            for j, y in enumerate(self.y_grid):
                yield float(x), float(y), float(self.density[i, j])


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    d = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def log_trapezoid(log_f: np.ndarray, grid: np.ndarray, axis: int = -1) -> np.ndarray:
    """log of the trapezoid integral of exp(log_f) along ``axis``."""
    log_w = np.log(trapezoid_weights(grid))
    shape = [1] * log_f.ndim
    shape[axis] = -1
    return logsumexp(log_f + log_w.reshape(shape), axis=axis)


def _check_grid(grid, name):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3:
        raise GridError(f"{name} needs at least three points")
    if np.any(np.diff(grid) <= 0):
        raise GridError(f"{name} must be strictly increasing")
    return grid


def _kernel_sd(cfg: SinkhornConfig) -> float:
    return math.sqrt(cfg.eps / 2.0) if cfg.p == 2 else math.sqrt(2.0) * cfg.eps


def _warn_coverage(x_grid, y_grid, X, Y, cfg):
    sd = COVER_SD * _kernel_sd(cfg)
    for grid, data, name in ((x_grid, X, "x"), (y_grid, Y, "y")):
        if grid[0] > data.min() - sd or grid[-1] < data.max() + sd:
            warnings.warn(f"{name} grid does not cover the data range by {COVER_SD:g} kernel standard "
                          f"deviations; the density is truncated to the grid", RuntimeWarning, stacklevel=3)


def _drift(log_f, grid, axis):
    """Largest relative change of a normaliser when every other grid point is dropped."""
    full = log_trapezoid(log_f, grid, axis)
    idx = np.arange(0, grid.size, 2)
    if idx[-1] != grid.size - 1:
        idx = np.append(idx, grid.size - 1)
    coarse = log_trapezoid(np.take(log_f, idx, axis=axis), grid[idx], axis)
    return float(np.max(np.abs(np.expm1(coarse - full))))


def _setup(policy, app, X, Y, grid, cfg, lam):
    if lam <= 0:
        raise ValueError("lam must be positive")
    if X.shape[1] != 1 or Y.shape[1] != 1:
        raise ValueError("grid evaluation needs d_x = d_y = 1")
    x_grid, y_grid = _check_grid(grid[0], "x grid"), _check_grid(grid[1], "y grid")
    _warn_coverage(x_grid, y_grid, X[:, 0], Y[:, 0], cfg)
    raw = policy.forward(x_grid[:, None])
    psi = app.value(raw[:, None, :], y_grid[None, :, None])
    psi = np.minimum(psi, cfg.B)
    return x_grid, y_grid, psi


def _dist(grid, centre, p):
    u = np.abs(grid - centre)
    return u if p == 1 else u * u


def causal_wc_density(lam: float, policy: DecisionRule, app: Application, grouped: GroupedDataset,
                      grid, cfg: SinkhornConfig) -> WorstCaseGrid:
    """Worst-case density of the soft-constrained causal problem.

    Each data point contributes a covariate Gibbs factor shared by its
    covariate group times an outcome Gibbs factor conditional on the covariate.
    """
    X, Y = grouped.X, grouped.flat_y
    x_grid, y_grid, psi = _setup(policy, app, X, Y, grid, cfg, lam)
    tau = lam * cfg.eps
    weights = grouped.weights
    log_dens = np.full(psi.shape, -np.inf)
    drift = 0.0
    for g, grp in enumerate(grouped.groups):
        cx = _dist(x_grid, grp.x[0], cfg.p)
        r = np.zeros(x_grid.size)
        parts = []
        for y_hat, prob in zip(grp.outcomes[:, 0], grp.probs):
            s = (psi - lam * (cx[:, None] + _dist(y_grid, y_hat, cfg.p)[None, :])) / tau
            log_int_y = log_trapezoid(s, y_grid, axis=1)
            drift = max(drift, _drift(s, y_grid, 1))
            r += prob * log_int_y
            parts.append((prob, s - log_int_y[:, None]))
        log_alpha = -log_trapezoid(r, x_grid)
        drift = max(drift, _drift(r, x_grid, 0))
        for prob, cond in parts:
            comp = math.log(weights[g] * prob) + log_alpha + r[:, None] + cond
            log_dens = np.logaddexp(log_dens, comp)
    if drift > DRIFT_TOL:
        raise GridError(f"grid too coarse: normaliser drift {drift:.3g} exceeds {DRIFT_TOL:g}")
    return WorstCaseGrid(x_grid, y_grid, np.exp(log_dens), "causal-sdro")


def sdro_wc_density(lam: float, policy: DecisionRule, app: Application, ds: Dataset, grid,
                    cfg: SinkhornConfig) -> WorstCaseGrid:
    """Worst-case density of the soft-constrained non-causal problem (one joint normaliser per point)."""
    x_grid, y_grid, psi = _setup(policy, app, ds.X, ds.Y, grid, cfg, lam)
    tau = lam * cfg.eps
    log_dens = np.full(psi.shape, -np.inf)
    drift = 0.0
    log_w = -math.log(ds.n)
    for x_hat, y_hat in zip(ds.X[:, 0], ds.Y[:, 0]):
        s = (psi - lam * (_dist(x_grid, x_hat, cfg.p)[:, None] + _dist(y_grid, y_hat, cfg.p)[None, :])) / tau
        inner = log_trapezoid(s, y_grid, axis=1)
        drift = max(drift, _drift(s, y_grid, 1), _drift(inner, x_grid, 0))
        log_dens = np.logaddexp(log_dens, log_w + s - log_trapezoid(inner, x_grid))
    if drift > DRIFT_TOL:
        raise GridError(f"grid too coarse: normaliser drift {drift:.3g} exceeds {DRIFT_TOL:g}")
    return WorstCaseGrid(x_grid, y_grid, np.exp(log_dens), "sdro")


def kl_wc_weights(lam: float, policy: DecisionRule, app: Application, ds: Dataset) -> np.ndarray:
    """Likelihood ratios of the KL worst case on the empirical points."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    psi = app.value(policy.forward(ds.X), ds.Y)
    return softmax(psi / lam)


# ---------------------------------------------------------------- hard dual


@dataclass
class DualCurve:
    lambdas: np.ndarray
    values: np.ndarray
    convex: bool = True
    notes: list[str] = field(default_factory=list)

    def second_differences(self) -> np.ndarray:
        return self.values[:-2] - 2 * self.values[1:-1] + self.values[2:]


@dataclass
class DualResult:
    lam: float
    value: float
    curve: DualCurve
    at_bound: bool  # the minimiser sits on an end of the bracket


def dual_value(lam: float, rb: float, policy, app, grouped, batch, cfg: SinkhornConfig) -> float:
    c = SinkhornConfig(cfg.p, cfg.eps, lam, cfg.B, cfg.n1, cfg.n2, cfg.n3)
    return lam * rb + saa_objective(policy, app, grouped, batch, c)


def golden_section(fun, lo: float, hi: float, tol: float = 1e-3, max_iter: int = 200) -> tuple[float, float]:
    """Minimise a unimodal function on [lo, hi] until the bracket is shorter than ``tol``."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def hard_dual_solve(policy, app, grouped: GroupedDataset, rho: float, cfg: SinkhornConfig, bracket,
                    rng: np.random.Generator, n_curve: int = 20, tol: float = 1e-3,
                    convex_tol: float = 1e-2) -> DualResult:
    """Minimise lam * rho_bar + SAA objective over lam for a fixed policy.

    One SAA batch is reused for every lam. If the sampled curve is not
    numerically convex the batch sizes are doubled once and the search is
    repeated; a second failure is recorded on the returned curve.
    """
    lo, hi = map(float, bracket)
    if not 0 < lo < hi:
        raise ValueError("bracket must satisfy 0 < lo < hi")
    rb = rho_bar(rho, cfg, grouped.d_x, grouped.d_y)
    if rb < 0:
        raise InfeasibleError(f"primal infeasible: shifted radius {rb:.6g} is negative")
    c = cfg
    notes = []
    for attempt in range(2):
        batch = make_saa_batch(grouped, c, rng)

        def fun(lam, _batch=batch, _c=c):
            return dual_value(lam, rb, policy, app, grouped, _batch, _c)

        lams = np.linspace(lo, hi, n_curve)
        curve = DualCurve(lams, np.array([fun(v) for v in lams]))
        if curve.second_differences().min(initial=0.0) >= -convex_tol:
            break
        notes.append(f"attempt {attempt + 1}: curve not convex with n2={c.n2}, n3={c.n3}")
        c = SinkhornConfig(c.p, c.eps, c.lam, c.B, c.n1, 2 * c.n2, 2 * c.n3)
    else:
        curve.convex = False
        warnings.warn("dual curve is not numerically convex after resampling", RuntimeWarning, stacklevel=2)
    curve.notes = notes
    lam, val = golden_section(fun, lo, hi, tol)
    # the ends are checked explicitly so that monotone curves return the exact endpoint
    for end in (lo, hi):
        v = fun(end)
        if v < val:
            lam, val = end, v
    at_bound = min(lam - lo, hi - lam) <= tol
    return DualResult(lam, val, curve, at_bound)


def density_csv_rows(grid: WorstCaseGrid):
    return list(grid.rows())
