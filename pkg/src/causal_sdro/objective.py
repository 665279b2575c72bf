"""Nested compositional objectives and their exact gradients.

The causal Sinkhorn objective of a decision rule ``f`` is

    lam*eps * E_x[ log E_xi1[ exp( E_{y|x}[ log E_xi2[ exp(Psi(f(x+xi1), y+xi2) / (lam*eps)) ] ] ) ] ]

and is written as the composition t1(E t2(E t3)) with t3 the exponentiated
loss, t2 the weighted geometric mean over the outcomes sharing a covariate
value, and t1 the logarithm. Every average of exponentials is evaluated in
log space with a max shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, GroupedDataset
from .kernels import SinkhornConfig, sample_kernel
from .losses import Application
from .policies import DecisionRule


class LossNaNError(FloatingPointError):
    pass


def value_and_grad(app: Application, raw, y):
    """Loss values and raw-output gradients, solving each recourse problem once."""
    if hasattr(app, "value_and_grad"):
        return app.value_and_grad(raw, y)
    return app.value(raw, y), app.grad(raw, y)


def log_mean_exp(a, axis=None):
    """log(mean(exp(a))) with a max shift; exact when ``a`` is constant along ``axis``."""
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else float(out.reshape(()))


def _check(psi, where="loss"):
    if np.isnan(psi).any():
        raise LossNaNError(f"NaN {where} encountered")


# ---------------------------------------------------------------- t-functions


def log_t3(policy: DecisionRule, app: Application, x_hat, outcomes, xi1, xi2, cfg: SinkhornConfig):
    """log t3 for one covariate value: clipped losses of every outcome over lam*eps."""
    raw = policy.forward(np.asarray(x_hat, float) + xi1)
    psi = np.minimum(app.value(raw, np.asarray(outcomes, float) + xi2), cfg.B)
    _check(psi)
    return psi / cfg.temperature


def t3(policy, app, x_hat, outcomes, xi1, xi2, cfg: SinkhornConfig) -> np.ndarray:
    return np.exp(log_t3(policy, app, x_hat, outcomes, xi1, xi2, cfg))


def t2(v, probs) -> float:
    """Weighted geometric mean exp(sum p log v)."""
    v = np.asarray(v, float)
    if np.any(v <= 0):
        raise ValueError("t2 requires strictly positive arguments")
    return float(np.exp(np.dot(probs, np.log(v))))


# ---------------------------------------------------------------- SAA batches


@dataclass
class SaaBatch:
    groups: np.ndarray  # indices into the grouped dataset
    weights: np.ndarray  # outer averaging weights, sum to one
    xi1: np.ndarray  # (n2, d_x) covariate perturbations, shared across groups
    xi2: np.ndarray  # (n3, d_y) outcome perturbations, shared across groups and outcomes


def make_saa_batch(grouped: GroupedDataset, cfg: SinkhornConfig, rng: np.random.Generator) -> SaaBatch:
    """Draw an SAA batch.

    With ``cfg.n1`` unset every group enters once with its empirical weight;
    otherwise ``n1`` rows are drawn uniformly with replacement and replaced by
    their groups, so that covariate values are sampled from their marginal.
    """
    if cfg.n1 is None:
        groups, weights = np.arange(len(grouped)), grouped.weights
    else:
        groups = grouped.row_group[rng.integers(0, grouped.n_rows, size=cfg.n1)]
        weights = np.full(cfg.n1, 1.0 / cfg.n1)
    xi1 = sample_kernel(grouped.d_x, cfg, rng, size=cfg.n2)
    xi2 = sample_kernel(grouped.d_y, cfg, rng, size=cfg.n3)
    return SaaBatch(groups, weights, xi1, xi2)


def _saa(policy, app, grouped: GroupedDataset, batch: SaaBatch, cfg: SinkhornConfig, need_grad: bool):
    tau = cfg.temperature
    G = batch.groups
    n1, n2, n3 = G.size, batch.xi1.shape[0], batch.xi2.shape[0]
    X = (grouped.X[G][:, None, :] + batch.xi1[None]).reshape(-1, grouped.d_x)
    raw, vjp = policy.forward_vjp(X) if need_grad else (policy.forward(X), None)
    raw = raw.reshape(n1, n2, -1)
    starts, ends = grouped.offsets[G], grouped.offsets[G + 1]
    rows = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
    pos = np.repeat(np.arange(n1), ends - starts)
    p = grouped.flat_p[rows]
    Y = grouped.flat_y[rows][:, None, :] + batch.xi2[None]
    raw_b, Y_b = raw[pos][:, :, None, :], Y[:, None, :, :]
    if need_grad:
        psi, dpsi = value_and_grad(app, raw_b, Y_b)
    else:
        psi, dpsi = app.value(raw_b, Y_b), None
    _check(psi)
    clipped = psi > cfg.B
    a = np.minimum(psi, cfg.B) / tau  # (R, n2, n3)
    L = log_mean_exp(a, axis=2)  # log of the inner mean of t3
    M = np.zeros((n1, n2))
    np.add.at(M, pos, p[:, None] * L)  # log t2
    Gi = log_mean_exp(M, axis=1)
    value = tau * float(batch.weights @ Gi)
    if not need_grad:
        return value, None
    v = np.exp(a - logsumexp(a, axis=2, keepdims=True))
    dpsi = np.where(clipped[..., None], 0.0, dpsi)
    inner = p[:, None, None] * np.einsum("rjk,rjkd->rjd", v, dpsi)
    U = np.zeros((n1, n2, inner.shape[-1]))
    np.add.at(U, pos, inner)
    wj = np.exp(M - logsumexp(M, axis=1, keepdims=True))
    U *= (batch.weights[:, None] * wj)[..., None]
    return value, vjp(U.reshape(n1 * n2, -1))


def saa_objective(policy, app, grouped, batch, cfg) -> float:
    return _saa(policy, app, grouped, batch, cfg, False)[0]


def saa_gradient(policy, app, grouped, batch, cfg) -> np.ndarray:
    return _saa(policy, app, grouped, batch, cfg, True)[1]


def saa_value_and_gradient(policy, app, grouped, batch, cfg):
    return _saa(policy, app, grouped, batch, cfg, True)


# ---------------------------------------------------------------- SDRO


@dataclass
class SdroBatch:
    rows: np.ndarray
    weights: np.ndarray
    xi_x: np.ndarray  # (m, d_x) joint perturbations shared across rows
    xi_y: np.ndarray  # (m, d_y)


def make_sdro_batch(ds: Dataset, cfg: SinkhornConfig, rng: np.random.Generator, n_draws: int | None = None) -> SdroBatch:
    if cfg.n1 is None:
        rows, weights = np.arange(ds.n), np.full(ds.n, 1.0 / ds.n)
    else:
        rows, weights = rng.integers(0, ds.n, size=cfg.n1), np.full(cfg.n1, 1.0 / cfg.n1)
    m = cfg.n2 * cfg.n3 if n_draws is None else n_draws
    return SdroBatch(rows, weights, sample_kernel(ds.d_x, cfg, rng, size=m), sample_kernel(ds.d_y, cfg, rng, size=m))


def _sdro(policy, app, ds: Dataset, batch: SdroBatch, cfg: SinkhornConfig, need_grad: bool):
    tau = cfg.temperature
    n, m = batch.rows.size, batch.xi_x.shape[0]
    X = (ds.X[batch.rows][:, None, :] + batch.xi_x[None]).reshape(-1, ds.d_x)
    raw, vjp = policy.forward_vjp(X) if need_grad else (policy.forward(X), None)
    raw = raw.reshape(n, m, -1)
    Y = ds.Y[batch.rows][:, None, :] + batch.xi_y[None]
    if need_grad:
        psi, dpsi = value_and_grad(app, raw, Y)
    else:
        psi = app.value(raw, Y)
    _check(psi)
    a = np.minimum(psi, cfg.B) / tau
    Li = log_mean_exp(a, axis=1)
    value = tau * float(batch.weights @ Li)
    if not need_grad:
        return value, None
    v = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    U = np.where((psi > cfg.B)[..., None], 0.0, dpsi) * (batch.weights[:, None] * v)[..., None]
    return value, vjp(U.reshape(n * m, -1))


def sdro_objective(policy, app, ds, batch, cfg) -> float:
    return _sdro(policy, app, ds, batch, cfg, False)[0]


def sdro_gradient(policy, app, ds, batch, cfg) -> np.ndarray:
    return _sdro(policy, app, ds, batch, cfg, True)[1]


# ---------------------------------------------------------------- KL and ERM


def _kl(policy, app, ds: Dataset, lam: float, need_grad: bool):
    if lam <= 0:
        raise ValueError("lam must be positive")
    raw, vjp = policy.forward_vjp(ds.X) if need_grad else (policy.forward(ds.X), None)
    if need_grad:
        psi, dpsi = value_and_grad(app, raw, ds.Y)
    else:
        psi = app.value(raw, ds.Y)
    _check(psi)
    a = psi / lam
    value = lam * log_mean_exp(a)
    if not need_grad:
        return value, None
    w = np.exp(a - logsumexp(a))
    return value, vjp(dpsi * w[:, None])


def kl_objective(policy, app, ds, lam) -> float:
    return _kl(policy, app, ds, lam, False)[0]


def kl_gradient(policy, app, ds, lam) -> np.ndarray:
    return _kl(policy, app, ds, lam, True)[1]


def kl_value_and_gradient(policy, app, ds, lam):
    return _kl(policy, app, ds, lam, True)


def erm_value_and_gradient(policy, app, ds: Dataset, rows=None):
    X, Y = (ds.X, ds.Y) if rows is None else (ds.X[rows], ds.Y[rows])
    raw, vjp = policy.forward_vjp(X)
    psi, dpsi = value_and_grad(app, raw, Y)
    _check(psi)
    return float(psi.mean()), vjp(dpsi / X.shape[0])


def erm_objective(policy, app, ds) -> float:
    psi = app.value(policy.forward(ds.X), ds.Y)
    _check(psi)
    return float(psi.mean())


def erm_gradient(policy, app, ds) -> np.ndarray:
    return erm_value_and_gradient(policy, app, ds)[1]


def mean_loss(policy, app, ds: Dataset) -> float:
    """Out-of-sample average loss of the mapped decisions."""
    return erm_objective(policy, app, ds)
