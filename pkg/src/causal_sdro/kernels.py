"""Perturbation kernels, transport cost and the ball feasibility constant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SinkhornConfig:
    """Ambiguity-set and sample-average settings.

    ``n1`` is the number of covariate groups drawn per batch (``None`` means
    the full batch), ``n2`` the number of covariate perturbations and ``n3``
    the number of outcome perturbations.
    """

    p: int = 2
    eps: float = 0.2
    lam: float = 1.0
    B: float = 1e3
    n1: int | None = None
    n2: int = 16
    n3: int = 16

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"transport exponent p must be 1 or 2, got {self.p}")
        if not (self.eps > 0 and self.lam > 0 and self.B > 0):
            raise ValueError("eps, lam and B must be positive")
        if (self.n1 is not None and self.n1 < 1) or self.n2 < 1 or self.n3 < 1:
            raise ValueError("sample counts must be at least 1")

    @property
    def temperature(self) -> float:
        return self.lam * self.eps


def sample_kernel(dim: int, cfg: SinkhornConfig, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from the density proportional to exp(-||u||_p^p / eps).

    With ``size`` given the result has shape ``(*size, dim)``.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    if cfg.p == 1:
        return rng.laplace(0.0, cfg.eps, size=shape)
    return rng.normal(0.0, math.sqrt(cfg.eps / 2.0), size=shape)


def kernel_log_density(u: np.ndarray, p: int, eps: float) -> np.ndarray:
    """Log density of the kernel at ``u`` (last axis is the coordinate)."""
    u = np.asarray(u, dtype=float)
    d = u.shape[-1]
    return -cost_norm(u, p) / eps - log_normalizer(d, p, eps)


def cost_norm(u: np.ndarray, p: int) -> np.ndarray:
    """||u||^p with the l1 norm for p=1 and the l2 norm for p=2."""
    if p == 1:
        return np.abs(u).sum(axis=-1)
    if p == 2:
        return (u * u).sum(axis=-1)
    raise ValueError(f"unsupported p={p}")


def log_normalizer(d: int, p: int, eps: float) -> float:
    """log of the integral of exp(-||u||^p / eps) over R^d."""
    if p == 1:
        return d * math.log(2 * eps)
    if p == 2:
        return 0.5 * d * math.log(math.pi * eps)
    raise ValueError(f"unsupported p={p}")


def transport_cost(a, a_hat, b, b_hat, p: int) -> float:
    a, a_hat = np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(a_hat, float))
    b, b_hat = np.asarray(b, float).reshape(-1), np.asarray(b_hat, float).reshape(-1)
    if a.shape != a_hat.shape or b.shape != b_hat.shape:
        raise ValueError("dimension mismatch in transport_cost")
    if p == 1:
        return float(np.abs(a - a_hat).sum() + np.abs(b - b_hat).sum())
    if p == 2:
        return float(np.sum((a - a_hat) ** 2) + np.sum((b - b_hat) ** 2))
    raise ValueError(f"unsupported p={p}")


def rho_bar(rho: float, cfg: SinkhornConfig, d_x: int, d_y: int) -> float:
    """Shifted radius; the entropic ball is non-empty iff this is >= 0."""
    if rho < 0:
        raise ValueError("radius must be non-negative")
    return rho**cfg.p + cfg.eps * (log_normalizer(d_x, cfg.p, cfg.eps) + log_normalizer(d_y, cfg.p, cfg.eps))
