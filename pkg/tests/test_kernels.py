import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from causal_sdro.kernels import (SinkhornConfig, kernel_log_density, log_normalizer, rho_bar, sample_kernel,
                                 transport_cost)


def test_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(p=3)
    with pytest.raises(ValueError):
        SinkhornConfig(eps=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(lam=-1.0)
    with pytest.raises(ValueError):
        SinkhornConfig(n2=0)
    assert SinkhornConfig(lam=2.0, eps=0.25).temperature == 0.5


def test_gaussian_kernel_variance():
    x = sample_kernel(1, SinkhornConfig(p=2, eps=0.5), np.random.default_rng(0), size=1_000_000)[:, 0]
    var = x.var()
    se = math.sqrt(2 * 0.25**2 / x.size)
    assert abs(var - 0.25) < 3 * se


def test_laplace_kernel_moments():
    x = sample_kernel(1, SinkhornConfig(p=1, eps=1.0), np.random.default_rng(1), size=1_000_000)[:, 0]
    assert abs(x.mean()) < 3 * math.sqrt(2.0 / x.size)
    # fourth moment of Laplace(0, 1) is 24, so var(x^2) = 24 - 4
    assert abs(x.var() - 2.0) < 3 * math.sqrt(20.0 / x.size)


def test_sample_shape():
    cfg = SinkhornConfig()
    assert sample_kernel(3, cfg, np.random.default_rng(0)).shape == (3,)
    assert sample_kernel(3, cfg, np.random.default_rng(0), size=4).shape == (4, 3)
    with pytest.raises(ValueError):
        sample_kernel(0, cfg, np.random.default_rng(0))


def test_transport_cost_examples():
    assert transport_cost([1, 2], [1, 2], [3], [3], 2) == 0.0
    assert transport_cost([1, 0], [0, 0], [0, 2], [0, 0], 2) == pytest.approx(5.0)
    assert transport_cost([1, -1], [0, 0], [], [], 1) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        transport_cost([1, 2], [1], [0], [0], 1)


vec = st.lists(st.floats(-5, 5), min_size=2, max_size=2)


@given(vec, vec, vec, vec, vec, vec)
@settings(max_examples=100, deadline=None)
def test_transport_cost_symmetry_and_triangle(a, ah, b, bh, c, ch):
    for p in (1, 2):
        assert transport_cost(a, ah, b, bh, p) == pytest.approx(transport_cost(ah, a, bh, b, p))
    # l1 triangle inequality holds blockwise
    assert transport_cost(a, c, b, ch, 1) <= transport_cost(a, ah, b, bh, 1) + transport_cost(ah, c, bh, ch, 1) + 1e-9


def test_rho_bar_examples():
    assert rho_bar(0.0, SinkhornConfig(p=2, eps=1 / math.pi), 1, 1) == pytest.approx(0.0, abs=1e-15)
    assert rho_bar(1.0, SinkhornConfig(p=1, eps=0.5), 1, 1) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        rho_bar(-1.0, SinkhornConfig(), 1, 1)


@given(st.floats(0, 10), st.floats(0, 10), st.sampled_from([1, 2]), st.floats(0.01, 3))
@settings(max_examples=100, deadline=None)
def test_rho_bar_monotone(r1, r2, p, eps):
    cfg = SinkhornConfig(p=p, eps=eps)
    lo, hi = sorted((r1, r2))
    assert rho_bar(lo, cfg, 2, 1) <= rho_bar(hi, cfg, 2, 1)


@pytest.mark.parametrize("p,eps,d", [(1, 0.3, 1), (1, 0.8, 2), (2, 0.2, 1), (2, 1.5, 3)])
def test_log_normalizer_monte_carlo(p, eps, d):
    # importance sampling with a wide Gaussian proposal
    rng = np.random.default_rng(7)
    s = 2.0 * max(eps, math.sqrt(eps))
    u = rng.normal(0.0, s, size=(400_000, d))
    log_q = -0.5 * (u**2).sum(axis=1) / s**2 - d * math.log(s * math.sqrt(2 * math.pi))
    norm = np.abs(u).sum(axis=1) if p == 1 else (u**2).sum(axis=1)
    est = math.log(np.mean(np.exp(-norm / eps - log_q)))
    assert abs(est - log_normalizer(d, p, eps)) < 1e-2


@pytest.mark.parametrize("p,eps", [(1, 0.4), (2, 0.3)])
def test_kernel_density_integrates_to_one_with_mode_at_origin(p, eps):
    val, _ = integrate.quad(lambda t: math.exp(kernel_log_density(np.array([t]), p, eps)), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-8)
    u = np.random.default_rng(0).normal(size=(100, 2))
    assert np.all(kernel_log_density(u, p, eps) <= kernel_log_density(np.zeros(2), p, eps))
