"""Decision rules: the soft regression forest and a two-layer ReLU network.

Both rules store their parameters in one flat vector ``theta`` so that the
optimizers can treat them uniformly. All evaluation methods accept a single
covariate vector (shape ``(d_x,)``) or a batch (shape ``(n, d_x)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class BoundaryError(ValueError):
    """An input lies exactly on a hard decision boundary."""


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class DecisionRule:
    """Common interface of parametric decision rules f(x; theta)."""

    kind = "abstract"
    d_x: int
    d_z: int
    theta: np.ndarray

    @property
    def dim(self) -> int:
        return self.theta.size

    def get_params(self) -> np.ndarray:
        return self.theta.copy()

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.size} parameters, got {theta.size}")
        self.theta[:] = theta

    def forward(self, x):
        raise NotImplementedError

    def vjp_theta(self, x, upstream):
        """Sum over the batch of upstream[n] . d f(x[n]) / d theta."""
        raise NotImplementedError

    def forward_vjp(self, x):
        """Outputs at ``x`` and a function mapping an upstream to ``vjp_theta(x, upstream)``."""
        return self.forward(x), lambda upstream: self.vjp_theta(x, upstream)

    def grad_x(self, x):
        raise NotImplementedError

    def leaf_mask(self) -> np.ndarray | None:
        """Boolean mask of parameters that are decisions (clipped when required)."""
        return None

    def project(self, radius: float, nonneg_leaves: bool = False) -> None:
        np.clip(self.theta, -radius, radius, out=self.theta)
        mask = self.leaf_mask()
        if nonneg_leaves and mask is not None:
            self.theta[mask] = np.maximum(self.theta[mask], 0.0)

    def copy(self):
        raise NotImplementedError

    def header(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------- soft forest


@dataclass
class _Block:
    """A run of consecutive trees sharing the same depth."""

    start: int  # offset into theta
    first_tree: int
    count: int
    depth: int
    left: np.ndarray  # (n_leaves, n_nodes) 1 where the route turns left at the node
    right: np.ndarray

    @property
    def n_nodes(self) -> int:
        return 2**self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth


def route_masks(depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Left/right incidence of each leaf route, nodes in heap order (children 2j+1, 2j+2)."""
    n_leaves, n_nodes = 2**depth, 2**depth - 1
    left = np.zeros((n_leaves, n_nodes))
    right = np.zeros((n_leaves, n_nodes))
    for leaf in range(n_leaves):
        node = 0
        for level in range(depth):
            bit = (leaf >> (depth - 1 - level)) & 1
            (right if bit else left)[leaf, node] = 1.0
            node = 2 * node + 1 + bit
    return left, right


class SoftRegressionForest(DecisionRule):
    """Ensemble of complete soft binary trees with sigmoid gates.

    Each tree routes ``x`` left at node ``j`` with probability
    ``sigmoid((w_j . x + b_j) / tau)``. The output is the average over trees of
    the route-probability weighted leaf vectors.

    Parameters are stored tree by tree as ``[W (nodes x d_x), b (nodes), leaves (leaves x d_z)]``.
    """

    kind = "srf"

    def __init__(self, d_x: int, d_z: int, depths, tau: float = 1.0, theta=None):
        depths = tuple(int(d) for d in depths)
        if not depths or min(depths) < 1:
            raise ValueError("need at least one tree with depth >= 1")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.d_x, self.d_z, self.depths, self.tau = int(d_x), int(d_z), depths, float(tau)
        self.blocks: list[_Block] = []
        off, t = 0, 0
        while t < len(depths):
            d = depths[t]
            cnt = 1
            while t + cnt < len(depths) and depths[t + cnt] == d:
                cnt += 1
            left, right = route_masks(d)
            self.blocks.append(_Block(off, t, cnt, d, left, right))
            off += cnt * self._tree_size(d)
            t += cnt
        self.theta = np.zeros(off) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (off,):
            raise ValueError(f"theta must have length {off}")

    def _tree_size(self, depth: int) -> int:
        return (2**depth - 1) * (self.d_x + 1) + 2**depth * self.d_z

    @property
    def n_trees(self) -> int:
        return len(self.depths)

    def views(self, blk: _Block, vec=None):
        """(W, b, leaves) views of ``vec`` (default theta) for one block."""
        vec = self.theta if vec is None else vec
        J, L, dx = blk.n_nodes, blk.n_leaves, self.d_x
        size = self._tree_size(blk.depth)
        arr = vec[blk.start:blk.start + blk.count * size].reshape(blk.count, size)
        W = arr[:, :J * dx].reshape(blk.count, J, dx)
        b = arr[:, J * dx:J * dx + J]
        leaves = arr[:, J * dx + J:].reshape(blk.count, L, self.d_z)
        return W, b, leaves

    def _gates(self, blk, X):
        W, b, _ = self.views(blk)
        return (np.einsum("nd,tjd->ntj", X, W) + b) / self.tau

    @staticmethod
    def _route(blk, s, sr):
        """Leaf probabilities by expanding the tree level by level (heap order)."""
        lead = s.shape[:-1]
        P = np.ones(lead + (1,))
        for level in range(blk.depth):
            lo, hi = 2**level - 1, 2**(level + 1) - 1
            P = np.stack([P * s[..., lo:hi], P * sr[..., lo:hi]], axis=-1).reshape(lead + (2 * (hi - lo),))
        return P

    def _eval(self, blk, X):
        Z = self._gates(blk, X)
        s, sr = expit(Z), expit(-Z)
        return Z, s, sr, self._route(blk, s, sr)

    def route_probs(self, x, t: int) -> np.ndarray:
        X, single = _as_batch(x)
        for blk in self.blocks:
            if blk.first_tree <= t < blk.first_tree + blk.count:
                p = self._eval(blk, X)[3][:, t - blk.first_tree]
                return p[0] if single else p
        raise IndexError(f"tree index {t} out of range")

    def forward(self, x):
        X, single = _as_batch(x)
        out = np.zeros((X.shape[0], self.d_z))
        for blk in self.blocks:
            _, _, leaves = self.views(blk)
            p = self._eval(blk, X)[3]
            out += np.einsum("ntl,tlk->nk", p, leaves)
        out /= self.n_trees
        return out[0] if single else out

    def _vjp(self, X, evals, upstream):
        U = np.asarray(upstream, dtype=float).reshape(X.shape[0], self.d_z)
        grad = np.zeros_like(self.theta)
        T = self.n_trees
        for blk, (_, s, sr, p) in zip(self.blocks, evals):
            _, _, leaves = self.views(blk)
            gW, gb, gleaves = self.views(blk, grad)
            gleaves[:] = np.einsum("ntl,nk->tlk", p, U) / T
            c = p * np.einsum("nk,tlk->ntl", U, leaves) / T
            dZ = ((c @ blk.left) * sr - (c @ blk.right) * s) / self.tau
            gW[:] = np.einsum("ntj,nd->tjd", dZ, X)
            gb[:] = dZ.sum(axis=0)
        return grad

    def vjp_theta(self, x, upstream):
        X, _ = _as_batch(x)
        return self._vjp(X, [self._eval(blk, X) for blk in self.blocks], upstream)

    def forward_vjp(self, x):
        X, single = _as_batch(x)
        evals = [self._eval(blk, X) for blk in self.blocks]
        out = np.zeros((X.shape[0], self.d_z))
        for blk, ev in zip(self.blocks, evals):
            out += np.einsum("ntl,tlk->nk", ev[3], self.views(blk)[2])
        out /= self.n_trees
        # the cached gates are only valid until theta changes
        return (out[0] if single else out), lambda upstream: self._vjp(X, evals, upstream)

    def grad_x(self, x):
        """Jacobian d f / d x, shape (d_z, d_x) or (n, d_z, d_x)."""
        X, single = _as_batch(x)
        J = np.zeros((X.shape[0], self.d_z, self.d_x))
        for blk in self.blocks:
            W, _, leaves = self.views(blk)
            _, s, sr, p = self._eval(blk, X)
            q = p[..., None] * leaves[None]  # (n, t, l, k)
            A = (np.einsum("ntlk,lj->ntjk", q, blk.left) * sr[..., None]
                 - np.einsum("ntlk,lj->ntjk", q, blk.right) * s[..., None])
            J += np.einsum("ntjk,tjd->nkd", A, W)
        J /= self.n_trees * self.tau
        return J[0] if single else J

    def hessian_x(self, x, k: int = 0):
        """Hessian of output ``k`` with respect to x, shape (d_x, d_x) or (n, d_x, d_x)."""
        if not 0 <= k < self.d_z:
            raise IndexError("output index out of range")
        X, single = _as_batch(x)
        H = np.zeros((X.shape[0], self.d_x, self.d_x))
        for blk in self.blocks:
            W, _, leaves = self.views(blk)
            _, s, sr, p = self._eval(blk, X)
            c = p * leaves[None, :, :, k]  # (n, t, l)
            # psi-weighted sum of gate weights along each route: (n, t, l, d)
            g = (np.einsum("lj,ntj,tjd->ntld", blk.left, sr, W)
                 - np.einsum("lj,ntj,tjd->ntld", blk.right, s, W))
            H += np.einsum("ntl,ntld,ntle->nde", c, g, g)
            m = (c @ (blk.left + blk.right)) * s * sr  # (n, t, j)
            H -= np.einsum("ntj,tjd,tje->nde", m, W, W)
        H /= self.n_trees * self.tau**2
        return H[0] if single else H

    def lipschitz_bounds(self) -> tuple[float, float]:
        """Upper bounds on the Lipschitz constants of f and of its Jacobian.

        The route-length factor is ``max(D_max - 1, 1)``. For forests of depth
        two or more this is ``D_max - 1``; a depth-one forest has one gate per
        route and would otherwise get the invalid bound zero.
        """
        w_max = pi_max = 0.0
        for blk in self.blocks:
            W, _, leaves = self.views(blk)
            w_max = max(w_max, float(np.linalg.norm(W, axis=-1).max()) / self.tau)
            pi_max = max(pi_max, float(np.linalg.norm(leaves, axis=-1).max()))
        r = max(max(self.depths) - 1, 1)
        L = w_max * pi_max * r
        S = w_max**2 * pi_max * r * (r + 0.25)
        return L, S

    def hard_forward(self, x):
        """Deterministic routing limit: go left iff w . x + b > 0."""
        X, single = _as_batch(x)
        n = X.shape[0]
        out = np.zeros((n, self.d_z))
        rows = np.arange(n)[:, None]
        for blk in self.blocks:
            _, _, leaves = self.views(blk)
            Z = self._gates(blk, X)
            trees = np.arange(blk.count)[None, :]
            node = np.zeros((n, blk.count), dtype=int)
            for _ in range(blk.depth):
                z = Z[rows, trees, node]
                if np.any(z == 0):
                    raise BoundaryError("input lies on a gate decision boundary")
                node = 2 * node + 1 + (z < 0)
            leaf = node - blk.n_nodes
            out += leaves[trees, leaf].sum(axis=1)
        out /= self.n_trees
        return out[0] if single else out

    def leaf_mask(self) -> np.ndarray:
        mask = np.zeros(self.theta.size, dtype=bool)
        for blk in self.blocks:
            _, _, leaves = self.views(blk, mask)
            leaves[:] = True
        return mask

    def copy(self) -> "SoftRegressionForest":
        return SoftRegressionForest(self.d_x, self.d_z, self.depths, self.tau, self.theta.copy())

    def header(self) -> dict:
        return {"kind": self.kind, "d_x": self.d_x, "d_z": self.d_z, "T": self.n_trees,
                "depths": ",".join(map(str, self.depths)), "tau": repr(self.tau)}


# ---------------------------------------------------------------- 2NN


class TwoLayerNet(DecisionRule):
    """Per-output two-layer ReLU network: out_k = mean_i a_ik * relu(w_ik . x + b_ik).

    Parameters are stored output by output as ``[a (m), b (m), W (m x d_x)]``.
    """

    kind = "nn2"

    def __init__(self, d_x: int, d_z: int, m: int, theta=None):
        self.d_x, self.d_z, self.m = int(d_x), int(d_z), int(m)
        n = self.m * self.d_z * (self.d_x + 2)
        self.theta = np.zeros(n) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (n,):
            raise ValueError(f"theta must have length {n}")

    def views(self, vec=None):
        vec = self.theta if vec is None else vec
        m = self.m
        arr = vec.reshape(self.d_z, m * (self.d_x + 2))
        return arr[:, :m], arr[:, m:2 * m], arr[:, 2 * m:].reshape(self.d_z, m, self.d_x)

    def _pre(self, X):
        a, b, W = self.views()
        return a, W, np.einsum("nd,kmd->nkm", X, W) + b

    def forward(self, x):
        X, single = _as_batch(x)
        a, _, Z = self._pre(X)
        out = (a * np.maximum(Z, 0.0)).sum(axis=-1) / self.m
        return out[0] if single else out

    def vjp_theta(self, x, upstream):
        X, _ = _as_batch(x)
        U = np.asarray(upstream, dtype=float).reshape(X.shape[0], self.d_z)
        a, _, Z = self._pre(X)
        grad = np.zeros_like(self.theta)
        ga, gb, gW = self.views(grad)
        ga[:] = np.einsum("nk,nkm->km", U, np.maximum(Z, 0.0)) / self.m
        dZ = U[:, :, None] * a * (Z > 0) / self.m
        gb[:] = dZ.sum(axis=0)
        gW[:] = np.einsum("nkm,nd->kmd", dZ, X)
        return grad

    def grad_x(self, x):
        X, single = _as_batch(x)
        a, W, Z = self._pre(X)
        J = np.einsum("nkm,kmd->nkd", a * (Z > 0), W) / self.m
        return J[0] if single else J

    def copy(self) -> "TwoLayerNet":
        return TwoLayerNet(self.d_x, self.d_z, self.m, self.theta.copy())

    def header(self) -> dict:
        return {"kind": self.kind, "d_x": self.d_x, "d_z": self.d_z, "m": self.m}


# ---------------------------------------------------------------- construction


def default_depth(d_x: int) -> int:
    return math.ceil(math.log2(d_x)) + 1 if d_x > 1 else 1


def init_policy(kind: str, d_x: int, d_z: int, rng: np.random.Generator, *, leaf_value=None,
                n_trees: int = 20, depth: int | None = None, width: int | None = None,
                tau: float = 1.0) -> DecisionRule:
    """Create a randomly initialised decision rule.

    Soft forests get gate weights ~ N(0, 1/d_x), zero biases and every leaf set
    to ``leaf_value`` (typically the mean training outcome). Networks get all
    weights ~ N(0, 1/d_x), zero biases and output weights ~ N(0, 1/m).
    """
    if kind == "srf":
        depth = default_depth(d_x) if depth is None else depth
        pol = SoftRegressionForest(d_x, d_z, [depth] * n_trees, tau)
        fill = np.zeros(d_z) if leaf_value is None else np.broadcast_to(np.asarray(leaf_value, float), (d_z,))
        for blk in pol.blocks:
            W, b, leaves = pol.views(blk)
            W[:] = rng.normal(0.0, 1.0 / math.sqrt(d_x), size=W.shape)
            b[:] = 0.0
            leaves[:] = fill
        return pol
    if kind == "nn2":
        m = 64 * d_x if width is None else width
        pol = TwoLayerNet(d_x, d_z, m)
        a, b, W = pol.views()
        a[:] = rng.normal(0.0, 1.0 / math.sqrt(m), size=a.shape)
        b[:] = 0.0
        W[:] = rng.normal(0.0, 1.0 / math.sqrt(d_x), size=W.shape)
        return pol
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------- serialization


def policy_to_text(policy: DecisionRule) -> str:
    lines = ["# decision rule"]
    lines += [f"{k}={v}" for k, v in policy.header().items()]
    lines.append(f"n_params={policy.dim}")
    lines.append("theta")
    lines += [float(v).hex() for v in policy.theta]
    return "\n".join(lines) + "\n"


def policy_from_text(text: str) -> DecisionRule:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        cut = lines.index("theta")
    except ValueError:
        raise ValueError("policy text has no theta section") from None
    head = dict(ln.split("=", 1) for ln in lines[:cut])
    theta = np.array([float.fromhex(v) for v in lines[cut + 1:]])
    if int(head["n_params"]) != theta.size:
        raise ValueError("parameter count does not match header")
    if head["kind"] == "srf":
        depths = [int(d) for d in head["depths"].split(",")]
        if len(depths) != int(head["T"]):
            raise ValueError("tree count does not match depths")
        return SoftRegressionForest(int(head["d_x"]), int(head["d_z"]), depths, float(head["tau"]), theta)
    if head["kind"] == "nn2":
        return TwoLayerNet(int(head["d_x"]), int(head["d_z"]), int(head["m"]), theta)
    raise ValueError(f"unknown policy kind {head['kind']!r}")


def save_policy(policy: DecisionRule, path) -> None:
    from .io import atomic_write_text
    atomic_write_text(path, policy_to_text(policy))


def load_policy(path) -> DecisionRule:
    with open(path) as fh:
        return policy_from_text(fh.read())
