import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_sdro.data import Dataset, group_conditionals, singleton_groups
from causal_sdro.kernels import SinkhornConfig
from causal_sdro.losses import Application, Constant, Newsvendor, Portfolio, Quadratic
from causal_sdro.objective import (SaaBatch, SdroBatch, erm_gradient, erm_objective, kl_gradient, kl_objective,
                                   make_saa_batch, make_sdro_batch, saa_gradient, saa_objective, saa_value_and_gradient,
                                   sdro_gradient, sdro_objective, t2, t3)
from causal_sdro.policies import SoftRegressionForest

from conftest import random_forest, rel_err, theta_fd


class Shifted(Application):
    """A base loss plus a constant."""

    def __init__(self, base, delta):
        self.base, self.delta = base, delta
        self.d_z, self.d_y = base.d_z, base.d_y

    def value(self, raw, y):
        return self.base.value(raw, y) + self.delta

    def grad(self, raw, y):
        return self.base.grad(raw, y)


def small_problem(rng, n=6, d_x=2, repeats=True):
    X = rng.normal(size=(n, d_x))
    if repeats:
        X[1] = X[0]
        X[3] = X[2]
    Y = rng.normal(size=(n, 1))
    return Dataset(X, Y)


def test_t2_examples():
    assert t2([3.7], [1.0]) == pytest.approx(3.7)
    assert t2([4.0, 1.0], [0.5, 0.5]) == pytest.approx(2.0)
    assert t2([2.5, 2.5, 2.5], [0.2, 0.3, 0.5]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        t2([1.0, 0.0], [0.5, 0.5])


def test_t3_examples():
    cfg = SinkhornConfig(lam=2.0, eps=0.3)
    pol = SoftRegressionForest(1, 1, [1])
    outs = np.array([[0.0], [1.0]])
    np.testing.assert_array_equal(t3(pol, Constant(0.0), [0.0], outs, [0.1], [0.2], cfg), [1.0, 1.0])
    np.testing.assert_allclose(t3(pol, Constant(0.6), [0.0], outs, [0.1], [0.2], cfg), [math.e] * 2, rtol=1e-15)
    assert t3(pol, Constant(0.6), [0.0], outs[:1], [0.1], [0.2], cfg).shape == (1,)


def test_constant_loss_objectives_are_exact():
    rng = np.random.default_rng(0)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (2,))
    for c in (0.0, 1.234, -3.5, 700.0):
        app = Constant(c)
        for lam, eps in ((1.0, 0.2), (0.01, 0.05), (1e4, 1.0)):
            cfg = SinkhornConfig(lam=lam, eps=eps, n2=3, n3=4)
            g = group_conditionals(ds)
            # equal up to the rounding of (c / (lam eps)) * (lam eps) and of weights summing to one
            for v in (saa_objective(pol, app, g, make_saa_batch(g, cfg, rng), cfg),
                      sdro_objective(pol, app, ds, make_sdro_batch(ds, cfg, rng), cfg),
                      kl_objective(pol, app, ds, lam)):
                assert abs(v - c) <= 4 * np.finfo(float).eps * abs(c)
            assert np.all(saa_gradient(pol, app, g, make_saa_batch(g, cfg, rng), cfg) == 0)


def test_single_draw_collapses_to_clipped_loss():
    rng = np.random.default_rng(1)
    ds = Dataset([[0.3, -0.2]], [[1.1]])
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=0.7, eps=0.4, n1=1, n2=1, n3=1, B=1e3)
    g = group_conditionals(ds)
    batch = make_saa_batch(g, cfg, rng)
    direct = app.value(pol.forward(ds.X[0] + batch.xi1[0]), ds.Y[0] + batch.xi2[0])
    assert saa_objective(pol, app, g, batch, cfg) == pytest.approx(float(direct), rel=1e-13)
    clipped = SinkhornConfig(lam=0.7, eps=0.4, n1=1, n2=1, n3=1, B=1e-3)
    assert saa_objective(pol, app, g, batch, clipped) == pytest.approx(min(float(direct), 1e-3), rel=1e-12)


def perturbed_losses(pol, app, g, batch, cfg):
    """Clipped losses over every (group, xi1, outcome, xi2) combination, with outcome weights."""
    vals, wts = [], []
    for gi, w in zip(batch.groups, batch.weights):
        grp = g.groups[gi]
        for xi1 in batch.xi1:
            z = pol.forward(grp.x + xi1)
            for y, p in zip(grp.outcomes, grp.probs):
                for xi2 in batch.xi2:
                    vals.append(min(float(app.value(z, y + xi2)), cfg.B))
                    wts.append(w * p / (len(batch.xi1) * len(batch.xi2)))
    return np.array(vals), np.array(wts)


def test_large_lambda_approaches_plain_average():
    rng = np.random.default_rng(2)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=1e6, eps=0.2, n2=3, n3=3)
    g = group_conditionals(ds)
    batch = make_saa_batch(g, cfg, rng)
    vals, wts = perturbed_losses(pol, app, g, batch, cfg)
    assert abs(saa_objective(pol, app, g, batch, cfg) - vals @ wts) < 1e-3


@given(st.integers(0, 10_000), st.floats(0.05, 5.0), st.floats(-50, 50))
@settings(max_examples=40, deadline=None)
def test_translation_equivariance_and_jensen(seed, lam, delta):
    rng = np.random.default_rng(seed)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=lam, eps=0.3, n2=3, n3=2)
    g = group_conditionals(ds)
    batch = make_saa_batch(g, cfg, rng)
    base = saa_objective(pol, app, g, batch, cfg)
    shifted = saa_objective(pol, Shifted(app, delta), g, batch, cfg)
    assert shifted == pytest.approx(base + delta, abs=1e-9 * max(1.0, abs(base)))
    vals, wts = perturbed_losses(pol, app, g, batch, cfg)
    assert base >= vals @ wts - 1e-10
    assert base <= cfg.B


@pytest.mark.parametrize("seed", range(6))
def test_saa_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(10 + seed)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (1, 2))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=rng.uniform(0.3, 3.0), eps=0.3, n1=2 if seed % 2 else None, n2=2, n3=2)
    g = group_conditionals(ds)
    batch = make_saa_batch(g, cfg, rng)
    val, grad = saa_value_and_gradient(pol, app, g, batch, cfg)
    assert val == saa_objective(pol, app, g, batch, cfg)
    assert rel_err(grad, theta_fd(pol, lambda p: saa_objective(p, app, g, batch, cfg))) < 1e-5


def test_saa_gradient_portfolio_multi_output():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(5, 2))
    X[1] = X[0]
    ds = Dataset(X, 0.1 * rng.normal(size=(5, 3)))
    app = Portfolio(3, 2.0)
    pol = random_forest(rng, 2, 4, (2,))
    cfg = SinkhornConfig(lam=1.5, eps=0.1, n2=2, n3=2)
    g = group_conditionals(ds)
    batch = make_saa_batch(g, cfg, rng)
    assert rel_err(saa_gradient(pol, app, g, batch, cfg),
                   theta_fd(pol, lambda p: saa_objective(p, app, g, batch, cfg))) < 1e-5


def test_leaf_scaling_on_a_linear_region():
    # every decision sits above every outcome, so the loss is h * z and the single-draw objective is linear in f
    pol = SoftRegressionForest(1, 1, [1])
    W, b, leaves = pol.views(pol.blocks[0])
    W[0] = [0.8]
    b[0] = [0.1]
    leaves[0] = [[50.0], [40.0]]
    ds = Dataset([[0.2]], [[1.0]])
    g = singleton_groups(ds)
    cfg = SinkhornConfig(lam=1.0, eps=0.1, n2=1, n3=1)
    batch = make_saa_batch(g, cfg, np.random.default_rng(0))
    app = Newsvendor(0.6, 1.0)
    g1 = saa_gradient(pol, app, g, batch, cfg)
    leaves *= 2
    g2 = saa_gradient(pol, app, g, batch, cfg)
    mask = pol.leaf_mask()
    np.testing.assert_allclose(g2[mask], g1[mask], rtol=1e-13)
    np.testing.assert_allclose(g2[~mask], 2 * g1[~mask], rtol=1e-13)


def test_causal_equals_sdro_on_singletons_with_paired_draws():
    rng = np.random.default_rng(3)
    ds = small_problem(rng, repeats=False)
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=0.8, eps=0.3, n2=4, n3=5)
    g = singleton_groups(ds)
    batch = make_saa_batch(g, cfg, rng)
    paired = SdroBatch(np.arange(ds.n), np.full(ds.n, 1 / ds.n), np.repeat(batch.xi1, cfg.n3, axis=0),
                       np.tile(batch.xi2, (cfg.n2, 1)))
    assert abs(saa_objective(pol, app, g, batch, cfg) - sdro_objective(pol, app, ds, paired, cfg)) <= 1e-12
    np.testing.assert_allclose(saa_gradient(pol, app, g, batch, cfg), sdro_gradient(pol, app, ds, paired, cfg),
                               atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_sdro_kl_erm_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(30 + seed)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    cfg = SinkhornConfig(lam=rng.uniform(0.3, 3.0), eps=0.3, n2=2, n3=2)
    batch = make_sdro_batch(ds, cfg, rng)
    assert rel_err(sdro_gradient(pol, app, ds, batch, cfg),
                   theta_fd(pol, lambda p: sdro_objective(p, app, ds, batch, cfg))) < 1e-5
    lam = rng.uniform(0.3, 3.0)
    assert rel_err(kl_gradient(pol, app, ds, lam), theta_fd(pol, lambda p: kl_objective(p, app, ds, lam))) < 1e-5
    assert rel_err(erm_gradient(pol, app, ds), theta_fd(pol, lambda p: erm_objective(p, app, ds))) < 1e-5


def test_kl_limits():
    rng = np.random.default_rng(4)
    ds = small_problem(rng)
    pol = random_forest(rng, 2, 1, (2,))
    app = Quadratic(1)
    assert abs(kl_objective(pol, app, ds, 1e6) - erm_objective(pol, app, ds)) < 1e-4
    losses = app.value(pol.forward(ds.X), ds.Y)
    assert abs(kl_objective(pol, app, ds, 1e-4) - losses.max()) < 1e-3
    with pytest.raises(ValueError):
        kl_objective(pol, app, ds, 0.0)


def test_erm_gradient_by_hand_on_depth_one_tree():
    pol = SoftRegressionForest(2, 1, [1])
    W, b, leaves = pol.views(pol.blocks[0])
    W[0] = [0.4, -0.3]
    b[0] = [0.2]
    leaves[0] = [[3.0], [2.0]]
    x = np.array([0.5, 1.0])
    ds = Dataset([x], [[1.0]])
    app = Newsvendor(0.6, 1.0)
    s = 1 / (1 + math.exp(-(0.4 * 0.5 - 0.3 * 1.0 + 0.2)))
    h = 0.6
    expect = h * np.array([s * (1 - s) * (3 - 2) * 0.5, s * (1 - s) * (3 - 2) * 1.0, s * (1 - s) * (3 - 2), s, 1 - s])
    np.testing.assert_allclose(erm_gradient(pol, app, ds), expect, rtol=1e-14)
    assert erm_objective(pol, Constant(0.0), ds) == 0.0


def test_batches_have_configured_sizes():
    rng = np.random.default_rng(5)
    ds = small_problem(rng)
    g = group_conditionals(ds)
    cfg = SinkhornConfig(n1=7, n2=3, n3=2)
    batch = make_saa_batch(g, cfg, rng)
    assert isinstance(batch, SaaBatch)
    assert batch.groups.shape == (7,) and batch.xi1.shape == (3, 2) and batch.xi2.shape == (2, 1)
    full = make_saa_batch(g, SinkhornConfig(n2=3, n3=2), rng)
    assert full.groups.size == len(g) and full.weights.sum() == pytest.approx(1.0)
    assert make_sdro_batch(ds, cfg, rng).xi_x.shape == (6, 2)
