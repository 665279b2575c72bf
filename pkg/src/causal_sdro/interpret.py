"""Global importance, permutation importance, integrated-gradient attribution and route tracing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .policies import DecisionRule, SoftRegressionForest


class DegenerateImportanceError(ZeroDivisionError):
    """Every raw importance is zero, so the scores cannot be normalised."""


@dataclass
class ImportanceReport:
    raw: np.ndarray  # (d_x,) non-negative scores
    method: str  # "gradient" or "permutation"

    @property
    def degenerate(self) -> bool:
        return not float(self.raw.sum()) > 0.0

    @property
    def normalized(self) -> np.ndarray:
        if self.degenerate:
            raise DegenerateImportanceError("all importances are zero; normalised scores are undefined")
        return self.raw / self.raw.sum()

    def csv_rows(self, names=None):
        names = names or [f"x{j}" for j in range(self.raw.size)]
        norm = self.normalized if not self.degenerate else np.full(self.raw.size, np.nan)
        return [(n, float(r), float(c)) for n, r, c in zip(names, self.raw, norm)]


def global_importance(policy: DecisionRule, ds: Dataset) -> ImportanceReport:
    """Mean over the data of the l1 norm (across outputs) of each column of the Jacobian."""
    J = policy.grad_x(ds.X)  # (n, d_z, d_x)
    return ImportanceReport(np.abs(J).sum(axis=1).mean(axis=0), "gradient")


def permutation_importance(policy: DecisionRule, ds: Dataset, rng: np.random.Generator,
                           n_repeats: int = 1) -> ImportanceReport:
    """Mean l1 change of the decision when one feature column is shuffled across rows."""
    if ds.n < 2:
        raise ValueError("permutation importance needs at least two rows")
    base = policy.forward(ds.X)
    raw = np.zeros(ds.d_x)
    for j in range(ds.d_x):
        for _ in range(n_repeats):
            Xp = ds.X.copy()
            Xp[:, j] = Xp[rng.permutation(ds.n), j]
            raw[j] += np.abs(policy.forward(Xp) - base).sum(axis=1).mean()
    return ImportanceReport(raw / n_repeats, "permutation")


@dataclass
class EigAttribution:
    phi: np.ndarray  # (d_x, d_z)
    baseline: np.ndarray  # (d_z,) mean decision over the reference data
    prescription: np.ndarray  # (d_z,) decision at the explained point

    def residual(self) -> np.ndarray:
        """Per-output gap between the summed attributions and prescription minus baseline."""
        return self.phi.sum(axis=0) - (self.prescription - self.baseline)

    def csv_rows(self, names=None):
        d_x, d_z = self.phi.shape
        names = names or [f"x{j}" for j in range(d_x)]
        if d_z == 1:
            return [(n, float(v)) for n, v in zip(names, self.phi[:, 0])]
        return [(f"{n}:z{k}", float(self.phi[j, k])) for j, n in enumerate(names) for k in range(d_z)]


def eig(policy: DecisionRule, x, ds: Dataset, M: int = 64) -> EigAttribution:
    """Integrated gradients from every reference row to ``x`` averaged over the rows.

    The path integral uses the M-point midpoint rule.
    """
    if M < 1:
        raise ValueError("M must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    diff = x[None, :] - ds.X  # (n, d_x)
    nodes = (np.arange(M) + 0.5) / M
    pts = ds.X[None, :, :] + nodes[:, None, None] * diff[None]  # (M, n, d_x)
    J = policy.grad_x(pts.reshape(-1, ds.d_x)).reshape(M, ds.n, policy.d_z, ds.d_x)
    avg_grad = J.mean(axis=0)  # (n, d_z, d_x)
    phi = np.einsum("nj,nkj->jk", diff, avg_grad) / ds.n
    baseline = policy.forward(ds.X).mean(axis=0)
    return EigAttribution(phi, baseline, policy.forward(x))


@dataclass
class RouteStep:
    node: int
    left_prob: float  # gate probability of turning left
    went_left: bool


@dataclass
class Route:
    leaf: int
    prob: float
    path: list[RouteStep]


@dataclass
class RouteTrace:
    trees: list[list[Route]]


def trace_routes(policy: SoftRegressionForest, x, top_k: int = 1) -> RouteTrace:
    """The ``top_k`` most probable leaves of every tree at ``x`` with their gate decisions."""
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    X = np.asarray(x, dtype=float).reshape(1, -1)
    trees = []
    for blk in policy.blocks:
        _, s, _, p = policy._eval(blk, X)
        for t in range(blk.count):
            probs = p[0, t]
            order = np.argsort(-probs, kind="stable")[:top_k]
            routes = []
            for leaf in order:
                steps, node = [], 0
                for level in range(blk.depth):
                    right = bool((leaf >> (blk.depth - 1 - level)) & 1)
                    steps.append(RouteStep(node, float(s[0, t, node]), not right))
                    node = 2 * node + 1 + right
                routes.append(Route(int(leaf), float(probs[leaf]), steps))
            trees.append(routes)
    return RouteTrace(trees)


def route_csv_rows(trace: RouteTrace):
    rows = []
    for t, routes in enumerate(trace.trees):
        for rank, r in enumerate(routes):
            path = " ".join(f"{st.node}{'L' if st.went_left else 'R'}:{st.left_prob!r}" for st in r.path)
            rows.append((t, rank, r.leaf, r.prob, path))
    return rows
