"""Stochastically corrected compositional gradient training and plain gradient descent."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, GroupedDataset, singleton_groups
from .kernels import SinkhornConfig, sample_kernel
from .losses import Application
from .objective import (LossNaNError, erm_value_and_gradient, kl_value_and_gradient, make_saa_batch,
                        saa_objective, value_and_grad)
from .policies import DecisionRule

TRACKER_FLOOR = 1e-300
# stored trackers are actual values times exp(-log_scale); rebase when a new
# exponent would leave this window
_RESCALE_AT = 500.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    K: int = 10_000
    c_alpha: float = 1.0
    c_beta: float = 1.0
    radius: float = 1e3
    nonneg_leaves: bool = False
    cadence: int = 500
    seed: int = 0
    record_timing: bool = False
    tracker_scope: str = "size"

    def __post_init__(self):
        if self.K < 1 or self.cadence < 1:
            raise ValueError("K and cadence must be positive")
        if self.radius <= 0 or self.c_alpha <= 0 or self.c_beta <= 0:
            raise ValueError("radius and step multipliers must be positive")
        if self.tracker_scope not in ("size", "group"):
            raise ValueError("tracker_scope must be 'size' or 'group'")


def step_schedule(k: int, K: int, c_alpha: float, c_beta: float) -> tuple[float, float]:
    """Constant step sizes c_alpha/sqrt(K) and min(1, c_beta/sqrt(K))."""
    if not 0 <= k < K:
        raise ValueError("iteration index out of range")
    root = math.sqrt(K)
    return c_alpha / root, min(1.0, c_beta / root)


@dataclass
class TraceRow:
    iter: int
    objective: float
    grad_norm_est: float
    wallclock_ms: float | None


@dataclass
class ScscState:
    """Solver iterate.

    With ``scope == "size"`` there is one scalar ``y1`` and one ``y2`` vector per
    group size, shared by all covariate values. With ``scope == "group"`` each
    covariate group keeps its own pair, so the trackers estimate the inner
    expectations conditional on the sampled covariate value.

    ``y1`` and the ``y2`` vectors are stored divided by
    ``exp(log_scale)``. The updates are linear in the tracked values and the
    search direction is invariant to a common rescaling, so a shared scale
    keeps very large exponentials representable without changing the path.
    """

    theta: np.ndarray
    theta_prev: np.ndarray
    y1: dict = field(default_factory=dict)
    y2: dict = field(default_factory=dict)
    log_scale: float | None = None
    k: int = 0
    scope: str = "size"

    def rescale(self, new_scale: float) -> None:
        if self.log_scale is not None:
            f = math.exp(self.log_scale - new_scale)
            for key in self.y1:
                self.y1[key] = max(self.y1[key] * f, TRACKER_FLOOR)
            for key in self.y2:
                self.y2[key] = np.maximum(self.y2[key] * f, TRACKER_FLOOR)
        self.log_scale = new_scale


def _log_t3_and_grad(policy, app, x, outcomes, xi1, xi2, cfg, need_grad):
    """log t3 for every outcome of a group; with ``need_grad`` also dPsi/dz and the policy VJP."""
    Y = outcomes + xi2
    if need_grad:
        raw, vjp = policy.forward_vjp(x + xi1)
        psi, dpsi = value_and_grad(app, raw[None, :], Y)
        dpsi = np.where((psi > cfg.B)[:, None], 0.0, dpsi)
    else:
        raw, vjp = policy.forward(x + xi1), None
        psi, dpsi = app.value(raw[None, :], Y), None
    if np.isnan(psi).any():
        raise LossNaNError("NaN loss")
    return np.minimum(psi, cfg.B) / cfg.temperature, dpsi, vjp


def scsc_step(state: ScscState, grouped: GroupedDataset, policy: DecisionRule, prev: DecisionRule,
              app: Application, cfg: SinkhornConfig, alpha: float, beta: float, rng: np.random.Generator,
              radius: float = 1e3, nonneg_leaves: bool = False) -> float:
    """One stochastic corrected update in place; returns the norm of the search direction.

    ``policy`` holds the current parameters and ``prev`` the previous ones.
    """
    g = int(grouped.row_group[rng.integers(grouped.n_rows)])
    grp = grouped.groups[g]
    xi1 = sample_kernel(grouped.d_x, cfg, rng)
    xi2 = sample_kernel(grouped.d_y, cfg, rng)
    try:
        a_cur, dpsi, vjp = _log_t3_and_grad(policy, app, grp.x, grp.outcomes, xi1, xi2, cfg, True)
        a_old, _, _ = _log_t3_and_grad(prev, app, grp.x, grp.outcomes, xi1, xi2, cfg, False)
    except LossNaNError:
        raise TrainingError(f"NaN loss at iteration {state.k}, group {g}") from None

    top = max(a_cur.max(), a_old.max())
    if state.log_scale is None or top - state.log_scale > _RESCALE_AT:
        state.rescale(top)
    t3_cur = np.exp(a_cur - state.log_scale)
    t3_old = np.exp(a_old - state.log_scale)

    key = len(grp.probs) if state.scope == "size" else g
    key1 = 0 if state.scope == "size" else g
    if key not in state.y2:
        state.y2[key] = np.maximum(t3_cur.copy(), TRACKER_FLOOR)
    y2 = state.y2[key]
    probs = grp.probs
    t2_old = float(np.exp(probs @ np.log(y2)))
    if key1 not in state.y1:
        state.y1[key1] = t2_old
    y1 = state.y1[key1]

    # direction from the old trackers: (1/y1) * (t2(y2) p / y2) * t3 / (lam eps) * dPsi
    coef = (t2_old / y1) * probs / y2 * t3_cur / cfg.temperature
    upstream = coef @ dpsi
    direction = vjp(upstream)

    y2_new = np.maximum((1 - beta) * (y2 + t3_cur - t3_old) + beta * t3_cur, TRACKER_FLOOR)
    t2_new = float(np.exp(probs @ np.log(y2_new)))
    y1_new = max((1 - beta) * (y1 + t2_new - t2_old) + beta * t2_new, TRACKER_FLOOR)

    if not (np.all(np.isfinite(direction)) and np.isfinite(y1_new) and np.all(np.isfinite(y2_new))):
        raise TrainingError(f"non-finite update at iteration {state.k}, group {g}")

    prev.theta[:] = policy.theta
    policy.theta -= alpha * direction
    policy.project(radius, nonneg_leaves)
    state.y2[key] = y2_new
    state.y1[key1] = y1_new
    state.theta, state.theta_prev = policy.theta, prev.theta
    state.k += 1
    return float(np.linalg.norm(direction))


@dataclass
class TrainResult:
    policy: DecisionRule
    trace: list[TraceRow]


def train_causal_sdro(grouped: GroupedDataset, policy: DecisionRule, app: Application, scfg: SinkhornConfig,
                      tcfg: TrainConfig, eval_batch=None, callback=None) -> TrainResult:
    """Run K corrected stochastic steps from the given initial policy (modified in place).

    The trace records the sample-average objective on a fixed evaluation batch
    after every ``cadence``-th step. ``callback(k, policy)`` is called after
    every step when given.
    """
    rng = np.random.default_rng(tcfg.seed)
    eval_rng = np.random.default_rng([tcfg.seed, 1])
    if eval_batch is None:
        eval_batch = make_saa_batch(grouped, SinkhornConfig(scfg.p, scfg.eps, scfg.lam, scfg.B, None,
                                                            scfg.n2, scfg.n3), eval_rng)
    prev = policy.copy()
    state = ScscState(policy.theta, prev.theta, scope=tcfg.tracker_scope)
    alpha, beta = step_schedule(0, tcfg.K, tcfg.c_alpha, tcfg.c_beta)
    trace: list[TraceRow] = []
    t0 = time.perf_counter()
    for k in range(tcfg.K):
        gnorm = scsc_step(state, grouped, policy, prev, app, scfg, alpha, beta, rng,
                          tcfg.radius, tcfg.nonneg_leaves)
        if callback is not None:
            callback(k, policy)
        if k % tcfg.cadence == 0:
            obj = saa_objective(policy, app, grouped, eval_batch, scfg)
            ms = (time.perf_counter() - t0) * 1e3 if tcfg.record_timing else None
            trace.append(TraceRow(k + 1, obj, gnorm, ms))
    return TrainResult(policy, trace)


def train_sdro(ds: Dataset, policy, app, scfg, tcfg, **kw) -> TrainResult:
    """Non-causal Sinkhorn DRO: every row is its own covariate group."""
    singleton = singleton_groups(ds)
    return train_causal_sdro(singleton, policy, app, scfg, tcfg, **kw)


def train_gd(objective: str, policy: DecisionRule, app: Application, ds: Dataset, steps: int, rate: float,
             lam: float | None = None, batch_size: int | None = None, seed: int = 0,
             radius: float = 1e3, nonneg_leaves: bool = False, cadence: int | None = None) -> TrainResult:
    """Fixed-rate gradient descent on the ERM or KL-DRO objective.

    ERM may be minibatched with ``batch_size``; KL-DRO is always full batch.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if objective not in ("erm", "kl"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "kl" and (lam is None or lam <= 0):
        raise ValueError("KL-DRO needs a positive lam")
    rng = np.random.default_rng(seed)
    cadence = cadence or max(1, steps // 100)
    trace: list[TraceRow] = []
    for k in range(steps):
        if objective == "kl":
            val, g = kl_value_and_gradient(policy, app, ds, lam)
        else:
            rows = None if batch_size is None or batch_size >= ds.n else rng.integers(0, ds.n, batch_size)
            val, g = erm_value_and_gradient(policy, app, ds, rows)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {k}")
        if k % cadence == 0:
            trace.append(TraceRow(k, val, float(np.linalg.norm(g)), None))
        policy.theta -= rate * g
        policy.project(radius, nonneg_leaves)
    return TrainResult(policy, trace)
