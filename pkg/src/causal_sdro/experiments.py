"""Benchmark protocol: paired ERM baselines and holdout selection of (lam, eps)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, group_conditionals, prescriptiveness, singleton_groups
from .kernels import SinkhornConfig
from .losses import Application
from .objective import mean_loss
from .optimizer import TrainConfig, TrainingError, train_causal_sdro, train_gd
from .policies import init_policy

MODELS = ("erm", "causal-sdro", "sdro", "kl-dro")


@dataclass(frozen=True)
class BenchSettings:
    """Training budgets shared by every cell of a benchmark."""

    policy: str = "srf"
    n_trees: int = 20
    depth: int | None = 4
    width: int | None = None
    tau: float = 1.0
    erm_steps: int = 3000
    erm_rate: float = 5.0
    kl_steps: int = 3000
    kl_rate: float = 5.0
    K: int = 6000
    c_alpha: float = 80.0
    c_beta: float = 30.0
    tracker_scope: str = "group"
    n2: int = 8
    n3: int = 8
    val_frac: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise ValueError("val_frac must lie in (0, 1)")


def initial_policy(app: Application, train: Dataset, s: BenchSettings, seed: int):
    rng = np.random.default_rng([seed, 7])
    return init_policy(s.policy, train.d_x, app.d_z, rng, leaf_value=train.Y.mean(axis=0),
                       n_trees=s.n_trees, depth=s.depth, width=s.width, tau=s.tau)


def fit(model: str, app: Application, train: Dataset, s: BenchSettings, seed: int,
        p: int = 2, lam: float | None = None, eps: float | None = None):
    """Train one model from the seed's shared initialisation and return the policy."""
    policy = initial_policy(app, train, s, seed)
    nonneg = bool(getattr(app, "nonneg_decisions", False))
    if model == "erm":
        train_gd("erm", policy, app, train, s.erm_steps, s.erm_rate, seed=seed, nonneg_leaves=nonneg)
    elif model == "kl-dro":
        train_gd("kl", policy, app, train, s.kl_steps, s.kl_rate, lam=lam, seed=seed, nonneg_leaves=nonneg)
    elif model in ("causal-sdro", "sdro"):
        scfg = SinkhornConfig(p=p, eps=eps, lam=lam, n2=s.n2, n3=s.n3)
        tcfg = TrainConfig(K=s.K, c_alpha=s.c_alpha, c_beta=s.c_beta, nonneg_leaves=nonneg, cadence=s.K,
                           seed=seed, tracker_scope=s.tracker_scope)
        grouped = group_conditionals(train) if model == "causal-sdro" else singleton_groups(train)
        train_causal_sdro(grouped, policy, app, scfg, tcfg)
    else:
        raise ValueError(f"unknown model {model!r}")
    return policy


def holdout_split(ds: Dataset, val_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng([seed, 11]).permutation(ds.n)
    n_val = max(1, int(round(val_frac * ds.n)))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def validation_loss(model, app, train, s, seed, p, lam, eps) -> float:
    fit_part, val_part = holdout_split(train, s.val_frac, seed)
    try:
        pol = fit(model, app, fit_part, s, seed, p, lam, eps)
    except TrainingError:
        return math.inf
    loss = mean_loss(pol, app, val_part)
    return loss if np.isfinite(loss) else math.inf


def select_hyper(model: str, app, train: Dataset, s: BenchSettings, seed: int, p: int,
                 lams, epss) -> tuple[float, float | None, dict]:
    """Pick the grid cell with the lowest holdout loss; ties go to the first cell."""
    eps_grid = list(epss) if model in ("causal-sdro", "sdro") else [None]
    scores = {}
    for lam in lams:
        for eps in eps_grid:
            scores[(lam, eps)] = validation_loss(model, app, train, s, seed, p, lam, eps)
    best = min(scores, key=lambda k: scores[k])
    if not np.isfinite(scores[best]):
        raise TrainingError("every grid cell failed during validation")
    return best[0], best[1], scores


@dataclass
class BenchRow:
    N: int
    d_x: int
    p: int
    lam: float | None
    eps: float | None
    model: str
    policy: str
    seed: int
    test_loss: float
    prescriptiveness: float
    oracle_loss: float


def _evaluate(model, app, train, test, s, seed, p, lam, eps, erm_loss, oracle, common) -> BenchRow:
    try:
        pol = fit(model, app, train, s, seed, p, lam, eps)
        loss = mean_loss(pol, app, test)
    except TrainingError:
        loss = math.nan
    pres = prescriptiveness(loss, erm_loss, oracle) if np.isfinite(loss) else math.nan
    return BenchRow(lam=lam, eps=eps, model=model, test_loss=loss, prescriptiveness=pres, **common)


def run_seed(app: Application, train: Dataset, test: Dataset, models, s: BenchSettings, seed: int,
             p: int = 2, lams=(1.0,), epss=(0.5,), select: bool = True,
             oracle_loss: float | None = None) -> list[BenchRow]:
    """ERM plus each requested model on one seed.

    With ``select`` the DRO hyperparameters are chosen on a holdout of the
    training rows and the winner is refit on all of them; otherwise every
    grid cell gets its own row.
    """
    oracle = app.oracle_loss(test.Y) if oracle_loss is None else oracle_loss
    erm = fit("erm", app, train, s, seed)
    erm_loss = mean_loss(erm, app, test)
    common = dict(N=train.n, d_x=train.d_x, p=p, policy=s.policy, seed=seed, oracle_loss=oracle)
    rows = [BenchRow(lam=None, eps=None, model="erm", test_loss=erm_loss, prescriptiveness=0.0, **common)]
    for model in models:
        if model == "erm":
            continue
        eps_grid = list(epss) if model in ("causal-sdro", "sdro") else [None]
        cells = [(lam, eps) for lam in lams for eps in eps_grid]
        if select and len(cells) > 1:
            lam, eps, _ = select_hyper(model, app, train, s, seed, p, lams, epss)
            cells = [(lam, eps)]
        for lam, eps in cells:
            rows.append(_evaluate(model, app, train, test, s, seed, p, lam, eps, erm_loss, oracle, common))
    return rows


def with_overrides(s: BenchSettings, **kw) -> BenchSettings:
    return replace(s, **{k: v for k, v in kw.items() if v is not None})
