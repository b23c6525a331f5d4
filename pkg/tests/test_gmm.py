import json
import math

import numpy as np
import pytest

import specteb.gmm as gmm_mod
from oracles import mixture_marginal_by_quadrature
from specteb.gmm import (
    GmmPrior,
    em_fit,
    em_run,
    gmm_log_derivs,
    gmm_marginal_ll,
    gmm_posterior,
    k1_moment_iteration,
    k1_stationarity_residual,
)

TWO = GmmPrior(2, [0.3, 0.7], [-1.5, 2.0], [0.04, 1.0])


def two_gaussian_data(n, seed, s_hi=1.5):
    rng = np.random.default_rng(seed)
    z = rng.random(n) < 0.3
    d = np.where(z, rng.normal(-1.5, 0.2, n), rng.normal(2.0, 1.0, n))
    s = rng.uniform(0, s_hi, n)
    return d + s * rng.standard_normal(n), s


def test_validation():
    with pytest.raises(ValueError):
        GmmPrior(2, [0.5, 0.6], [0, 1], [1, 1])
    with pytest.raises(ValueError):
        GmmPrior(2, [0.5, 0.5], [0, 1], [1, -1])
    with pytest.raises(ValueError):
        GmmPrior(2, [1.0], [0], [1])
    with pytest.raises(ValueError):
        em_fit([1.0], [1.0], K=2)
    with pytest.raises(ValueError):
        em_fit([1.0, 2.0], [0.0, 1.0], K=1, pin_null=True)


def test_marginal_ll_examples():
    point = GmmPrior(1, [1.0], [0.0], [0.0])
    assert gmm_marginal_ll(point, [0.0], [1.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))
    swapped = GmmPrior(2, [0.7, 0.3], [2.0, -1.5], [1.0, 0.04])
    x, s = two_gaussian_data(50, 1)
    assert gmm_marginal_ll(TWO, x, s) == pytest.approx(gmm_marginal_ll(swapped, x, s), rel=1e-14)


def test_marginal_matches_convolution_quadrature():
    for x, s in [(-1.4, 0.3), (0.0, 1.2), (3.5, 0.05), (-3.0, 2.0)]:
        ref = mixture_marginal_by_quadrature(TWO.alpha, TWO.mu, TWO.V, x, s)
        assert math.exp(gmm_marginal_ll(TWO, [x], [s])) == pytest.approx(ref, rel=1e-8)


def test_json_round_trip():
    back = GmmPrior.from_json(TWO.to_json())
    assert back.K == 2 and np.array_equal(back.mu, TWO.mu)
    obj = json.loads(TWO.to_json())
    del obj["V"]
    with pytest.raises(ValueError, match="V"):
        GmmPrior.from_json(json.dumps(obj))


def test_em_monotone_and_invariants():
    x, s = two_gaussian_data(600, 2)
    init = GmmPrior(3, [1 / 3] * 3, [-2.0, 0.0, 2.0], [1.0, 1.0, 1.0])
    run = em_run(x, s, init, max_iters=300, tol=0)
    assert np.all(np.diff(run.trace) >= -1e-9)
    assert run.prior.alpha.sum() == pytest.approx(1.0) and np.all(run.prior.V >= 0)


def test_k1_fit_solves_likelihood_equations():
    x, s = two_gaussian_data(400, 3)
    prior, ll = em_fit(x, s, 1, tol=0, max_iters=100_000)
    r_mu, r_V = k1_stationarity_residual(x, s, prior.mu[0], prior.V[0])
    assert abs(r_mu) <= 1e-8 and abs(r_V) <= 1e-8
    assert ll == pytest.approx(gmm_marginal_ll(prior, x, s))


def test_k1_moment_equation_agrees_for_equal_noise():
    x, _ = two_gaussian_data(400, 4)
    s = np.full(x.size, 0.7)
    prior, _ = em_fit(x, s, 1, tol=0, max_iters=100_000)
    mu, V = k1_moment_iteration(x, s)
    assert mu == pytest.approx(prior.mu[0], abs=1e-9)
    assert V == pytest.approx(prior.V[0], rel=1e-8)


def test_k1_noiseless_gives_sample_moments():
    x = np.random.default_rng(5).normal(1.0, 2.0, 300)
    prior, _ = em_fit(x, np.zeros_like(x), 1, tol=0, max_iters=1000)
    assert prior.mu[0] == pytest.approx(x.mean(), rel=1e-12)
    assert prior.V[0] == pytest.approx(x.var(), rel=1e-10)


def test_two_gaussian_recovery_single_seed():
    x, s = two_gaussian_data(1000, 6)
    prior, _ = em_fit(x, s, 2, seed=0)
    order = np.argsort(prior.mu)
    assert np.allclose(prior.alpha[order], [0.3, 0.7], atol=0.05)
    assert np.allclose(prior.mu[order], [-1.5, 2.0], atol=0.15)
    assert np.allclose(prior.V[order], [0.04, 1.0], atol=0.2)


def test_restarts_pick_best_and_are_deterministic():
    x, s = two_gaussian_data(300, 7)
    a, lla = em_fit(x, s, 3, restarts=4, seed=11)
    b, llb = em_fit(x, s, 3, restarts=4, seed=11)
    assert lla == llb and np.array_equal(a.mu, b.mu)
    _, ll1 = em_fit(x, s, 3, restarts=1, seed=11)
    assert lla >= ll1


def test_all_collapsed_raises(monkeypatch):
    def collapsed(delta_hat, s, init, *args, **kw):
        return gmm_mod.EmRun(init, -1.0, np.array([-1.0]), 1, False, collapsed=True)

    monkeypatch.setattr(gmm_mod, "em_run", collapsed)
    with pytest.raises(RuntimeError, match="collapsed"):
        em_fit([0.0, 1.0, 2.0], [1.0, 1.0, 1.0], 2, restarts=3)


def test_pinned_null_component():
    rng = np.random.default_rng(8)
    d = np.where(rng.random(800) < 0.6, 0.0, rng.normal(1.0, 0.5, 800))
    s = rng.uniform(0.1, 0.5, 800)
    prior, _ = em_fit(d + s * rng.standard_normal(800), s, 2, pin_null=True)
    assert prior.mu[0] == 0.0 and prior.V[0] == 0.0
    assert prior.alpha[0] == pytest.approx(0.6, abs=0.08)
    post = gmm_posterior(prior, 0.02, 0.2)
    assert post.null_probability is not None and 0 < post.null_probability < 1


def test_posterior_k1_conjugate():
    p = GmmPrior(1, [1.0], [0.5], [2.0])
    post = gmm_posterior(p, 3.0, 1.0)
    assert post.mean == pytest.approx((1.0 * 0.5 + 2.0 * 3.0) / 3.0)
    assert post.variance == pytest.approx(2.0 / 3.0)


def test_posterior_noiseless():
    post = gmm_posterior(TWO, 0.7, 0.0)
    assert np.allclose(post.mu, 0.7) and np.allclose(post.V, 0.0)
    assert post.mean == pytest.approx(0.7) and post.variance == pytest.approx(0.0, abs=1e-15)


def test_posterior_matches_tweedie_on_marginal():
    h = 1e-4
    for x, s in [(-1.2, 0.4), (0.5, 1.0), (3.0, 0.2)]:
        f = lambda v: gmm_marginal_ll(TWO, [v], [s])
        # fourth-order central difference for the score
        score = (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)
        assert gmm_posterior(TWO, x, s).mean == pytest.approx(x + s * s * score, rel=1e-6)
        _, d1, d2 = gmm_log_derivs(TWO, [x], [s])
        assert d1[0] == pytest.approx(score, rel=1e-7, abs=1e-9)
        assert gmm_posterior(TWO, x, s).variance == pytest.approx(s * s * (1 + s * s * d2[0]), rel=1e-9)


def test_posterior_interpolates_between_observation_and_prior_mean():
    p = GmmPrior(1, [1.0], [1.0], [0.5])
    x = 4.0
    means = [gmm_posterior(p, x, s).mean for s in (0.0, 0.3, 1.0, 3.0, 30.0)]
    assert means[0] == pytest.approx(x)
    assert all(a > b for a, b in zip(means, means[1:]))
    assert means[-1] == pytest.approx(1.0, abs=0.01)
