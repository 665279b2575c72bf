"""Synthetic generators, CSV ingestion and conditional grouping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised for malformed datasets or input files."""


@dataclass
class Dataset:
    """Empirical joint sample of covariates ``X`` (N, d_x) and outcomes ``Y`` (N, d_y)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] != self.Y.shape[0]:
            raise DataError(f"row count mismatch: {self.X.shape[0]} covariate rows, {self.Y.shape[0]} outcome rows")
        if self.X.shape[0] == 0:
            raise DataError("no data rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise DataError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_x(self) -> int:
        return self.X.shape[1]

    @property
    def d_y(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx])


@dataclass
class Group:
    x: np.ndarray
    outcomes: np.ndarray  # (n_o, d_y) distinct outcomes
    probs: np.ndarray  # conditional frequencies, sum to one
    count: int  # number of dataset rows in the group


@dataclass
class GroupedDataset:
    groups: list[Group]
    row_group: np.ndarray  # row index -> group index
    n_rows: int
    d_x: int
    d_y: int
    # flattened outcome table used by the vectorised objectives
    flat_y: np.ndarray = field(init=False, repr=False)
    flat_p: np.ndarray = field(init=False, repr=False)
    flat_group: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = [len(g.probs) for g in self.groups]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat_y = np.concatenate([g.outcomes for g in self.groups], axis=0)
        self.flat_p = np.concatenate([g.probs for g in self.groups])
        self.flat_group = np.repeat(np.arange(len(self.groups)), sizes)

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def X(self) -> np.ndarray:
        return np.stack([g.x for g in self.groups])

    @property
    def weights(self) -> np.ndarray:
        """Marginal empirical probability of each covariate value."""
        return np.array([g.count for g in self.groups], dtype=float) / self.n_rows


def group_conditionals(ds: Dataset) -> GroupedDataset:
    """Group rows sharing a bit-identical covariate vector.

    Within a group, identical outcome vectors are merged and their conditional
    frequency is the count divided by the group size.
    """
    keys: dict[bytes, int] = {}
    members: list[list[int]] = []
    row_group = np.empty(ds.n, dtype=int)
    X = np.ascontiguousarray(ds.X)
    for i in range(ds.n):
        k = X[i].tobytes()
        g = keys.setdefault(k, len(members))
        if g == len(members):
            members.append([])
        members[g].append(i)
        row_group[i] = g
    groups = []
    for rows in members:
        ys: dict[bytes, list] = {}
        for i in rows:
            yk = np.ascontiguousarray(ds.Y[i]).tobytes()
            if yk in ys:
                ys[yk][1] += 1
            else:
                ys[yk] = [ds.Y[i].copy(), 1]
        outcomes = np.stack([v[0] for v in ys.values()])
        counts = np.array([v[1] for v in ys.values()], dtype=float)
        groups.append(Group(ds.X[rows[0]].copy(), outcomes, counts / counts.sum(), len(rows)))
    return GroupedDataset(groups, row_group, ds.n, ds.d_x, ds.d_y)


def singleton_groups(ds: Dataset) -> GroupedDataset:
    """Treat every row as its own covariate group, even when covariates repeat."""
    groups = [Group(ds.X[i].copy(), ds.Y[i:i + 1].copy(), np.ones(1), 1) for i in range(ds.n)]
    return GroupedDataset(groups, np.arange(ds.n), ds.n, ds.d_x, ds.d_y)


# ---------------------------------------------------------------- generators


@dataclass(frozen=True)
class NewsvendorGenConfig:
    N: int
    d_x: int
    c_amp: float = 1.7
    h: float = 0.6
    b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.d_x < 1:
            raise DataError("N and d_x must be positive")
        if self.h <= 0 or self.b <= 0:
            raise DataError("holding and stock-out costs must be positive")


@dataclass(frozen=True)
class InventoryGenConfig:
    N: int
    d_x: int
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.d_x < 1:
            raise DataError("N and d_x must be positive")


MAX_REJECTIONS = 10**6


def covariance(d_x: int) -> np.ndarray:
    idx = np.arange(d_x)
    return 0.5 ** np.abs(idx[:, None] - idx[None, :])


def sample_covariates(n: int, d_x: int, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(covariance(d_x))
    return rng.standard_normal((n, d_x)) @ chol.T


def f_true(t, c_amp: float = 1.7):
    t = np.asarray(t, dtype=float)
    return c_amp * (np.sin(2 * t) + 2 * np.exp(-16 * t**2) + 1)


def generate_newsvendor(cfg: NewsvendorGenConfig, rng: np.random.Generator | None = None) -> Dataset:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    beta = rng.uniform(-0.1, 0.1, size=cfg.d_x)
    X = sample_covariates(cfg.N, cfg.d_x, rng)
    mean = f_true(X @ beta, cfg.c_amp)
    y = np.empty(cfg.N)
    for i in range(cfg.N):
        for _ in range(MAX_REJECTIONS):
            v = mean[i] + rng.standard_normal()
            if v >= 0:
                y[i] = v
                break
        else:
            raise RuntimeError(f"acceptance-rejection failed for sample {i} after {MAX_REJECTIONS} draws")
    return Dataset(X, y[:, None])


def generate_inventory(cfg: InventoryGenConfig, rng: np.random.Generator | None = None) -> Dataset:
    # Gamma(k, s) uses the shape/scale convention, so its mean is k*s.
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    beta = rng.uniform(-0.1, 0.1, size=cfg.d_x)
    X = sample_covariates(cfg.N, cfg.d_x, rng)
    scale = np.exp(X @ beta)
    Y = np.column_stack([
        rng.exponential(scale),
        rng.gamma(2.0, scale),
        rng.gamma(4.0, scale),
    ])
    return Dataset(X, Y)


@dataclass(frozen=True)
class PortfolioGenConfig:
    """Synthetic daily returns driven by a few persistent covariates."""

    N: int
    d_x: int = 3
    n_assets: int = 10
    seed: int = 0


def generate_portfolio(cfg: PortfolioGenConfig, rng: np.random.Generator | None = None) -> Dataset:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    # AR(1) covariates so that rolling windows see slowly varying regimes
    X = np.empty((cfg.N, cfg.d_x))
    x = rng.standard_normal(cfg.d_x)
    for t in range(cfg.N):
        x = 0.95 * x + math.sqrt(1 - 0.95**2) * rng.standard_normal(cfg.d_x)
        X[t] = x
    loadings = rng.normal(0.0, 0.15, size=(cfg.d_x, cfg.n_assets))
    base = rng.uniform(0.0, 0.08, size=cfg.n_assets)
    vol = rng.uniform(0.8, 2.0, size=cfg.n_assets)
    market = rng.standard_normal(cfg.N)
    noise = rng.standard_normal((cfg.N, cfg.n_assets))
    Y = base + X @ loadings + vol * (0.6 * market[:, None] + 0.8 * noise)
    return Dataset(X, Y)


def train_test_split(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    if not 0 < n_train < ds.n:
        raise DataError("n_train must leave a non-empty test set")
    return ds.subset(slice(0, n_train)), ds.subset(slice(n_train, ds.n))


# ---------------------------------------------------------------- CSV


def load_csv(path, feature_cols, outcome_cols) -> Dataset:
    """Read a CSV with a header row; lines starting with '#' are ignored."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.lstrip().startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: no data rows") from None
    index = {name: j for j, name in enumerate(header)}
    for name in list(feature_cols) + list(outcome_cols):
        if name not in index:
            raise DataError(f"{path}: missing column {name!r}")
    fcols = [index[c] for c in feature_cols]
    ocols = [index[c] for c in outcome_cols]
    X, Y = [], []
    for r, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue

        def cell(j, _row=row, _r=r):
            try:
                return float(_row[j])
            except (ValueError, IndexError):
                val = _row[j] if j < len(_row) else ""
                raise DataError(f"{path}: non-numeric value {val!r} at row {_r}, column {header[j]!r}") from None

        X.append([cell(j) for j in fcols])
        Y.append([cell(j) for j in ocols])
    if not X:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(X).reshape(len(X), len(fcols)), np.array(Y).reshape(len(Y), len(ocols)))


def prescriptiveness(loss_policy: float, loss_erm: float, loss_oracle: float) -> float:
    """Percentage of the ERM-to-oracle gap closed by a policy."""
    gap = loss_erm - loss_oracle
    if gap == 0:
        raise ZeroDivisionError("ERM loss equals oracle loss; prescriptiveness is undefined")
    return (1.0 - (loss_policy - loss_oracle) / gap) * 100.0
