import numpy as np
import pytest

from causal_sdro.policies import SoftRegressionForest, TwoLayerNet


def central_diff(fun, x, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def theta_fd(policy, fun, h=1e-5):
    """Finite-difference gradient of ``fun(policy)`` over the flattened parameters."""
    th = policy.theta.copy()

    def at(v):
        policy.theta[:] = v
        return fun(policy)

    try:
        return central_diff(at, th, h)
    finally:
        policy.theta[:] = th


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def random_forest(rng, d_x=3, d_z=2, depths=(2, 3), scale=1.0, tau=1.0):
    pol = SoftRegressionForest(d_x, d_z, depths, tau)
    pol.theta[:] = scale * rng.normal(size=pol.dim)
    return pol


def random_net(rng, d_x=3, d_z=2, m=5):
    pol = TwoLayerNet(d_x, d_z, m)
    pol.theta[:] = rng.normal(size=pol.dim)
    return pol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
