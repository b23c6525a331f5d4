import json
import math
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_density, simplex_projection_by_supports
from specteb.mle import (
    FitConfig,
    fista,
    fit,
    fit_records,
    gradient_nll,
    neg_log_likelihood,
    project_simplex,
    projected_gradient_norm,
)
from specteb.spectral import SpectralPrior, eval_density, heat_basis, kappa

FROZEN = json.loads((pathlib.Path(__file__).parent / "frozen" / "oracle_values.json").read_text())


def test_projection_examples():
    assert np.allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    assert np.allclose(project_simplex([1.0, 1.0]), [0.5, 0.5])
    assert np.allclose(project_simplex([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    assert np.allclose(project_simplex([-1.0, -1.0, -1.0]), [1 / 3] * 3)
    with pytest.raises(ValueError):
        project_simplex([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_projection_matches_support_enumeration(y):
    p = project_simplex(y)
    assert p.min() >= 0 and p.sum() == pytest.approx(1.0)
    ref = simplex_projection_by_supports(y)
    assert np.sum((p - np.asarray(y)) ** 2) <= np.sum((ref - np.asarray(y)) ** 2) + 1e-12
    assert np.allclose(p, ref, atol=1e-9)


def test_nll_uniform_model():
    N = 3
    f = np.full(2 * N + 1, 1 / (2 * math.pi))
    x = np.linspace(-3, 3, 7)
    assert neg_log_likelihood(f, x, np.full(7, 0.2)) == pytest.approx(7 * math.log(2 * math.pi))
    with pytest.raises(ValueError):
        neg_log_likelihood(np.ones(6), x, x)


def test_nll_infinite_when_density_vanishes():
    N = 2
    f = np.zeros(5)
    f[2] = 1 / kappa(N)
    # a single-node Fejer kernel vanishes at 2 pi m / (N + 1)
    assert neg_log_likelihood(f, np.array([2 * math.pi / 3]), np.array([0.0])) == math.inf


def test_gradient_matches_finite_differences(rng):
    N = 6
    x = rng.uniform(-math.pi, math.pi, 40)
    t = rng.uniform(0, 0.5, 40)
    w = rng.dirichlet(np.ones(2 * N + 1)) * 0.9 + 0.1 / (2 * N + 1)
    f = w / kappa(N)
    g = gradient_nll(f, x, t)
    h = 1e-6
    fd = np.array([(neg_log_likelihood(f + h * e, x, t) - neg_log_likelihood(f - h * e, x, t)) / (2 * h)
                   for e in np.eye(f.size)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7 * np.abs(g).max())


@pytest.mark.parametrize("case", FROZEN["tiny_mle"], ids=lambda c: f"seed{c['seed']}")
def test_fista_matches_frozen_grid_search(case):
    x, t = np.array(case["x"]), np.array(case["t"])
    prior, report = fit(x, t, FitConfig(N=2, tol=1e-14, max_iters=20000))
    assert report.final_nll <= case["nll"] + 1e-6
    assert report.final_nll >= case["nll"] - 1e-6
    # the node values themselves are identified here since the basis has full column rank
    assert np.allclose(prior.f, case["f"], atol=2e-3)


def test_trace_is_monotone_with_restart(rng):
    x = rng.normal(0, 0.6, 300)
    t = rng.uniform(0, 0.1, 300)
    _, report = fit(x, t, FitConfig(N=24, tol=1e-12, max_iters=3000))
    assert np.all(np.diff(report.objective_trace) <= 1e-9 * np.abs(report.objective_trace[:-1]))
    assert report.converged


def test_fixed_step_and_no_restart_still_decrease_overall(rng):
    x = rng.normal(0, 1.0, 200)
    t = rng.uniform(0, 0.2, 200)
    _, bt = fit(x, t, FitConfig(N=8, tol=1e-12))
    _, fixed = fit(x, t, FitConfig(N=8, step_size=0.05, tol=1e-12, max_iters=20000))
    _, plain = fit(x, t, FitConfig(N=8, restart=False, tol=1e-12, max_iters=20000))
    assert fixed.final_nll == pytest.approx(bt.final_nll, abs=1e-5)
    assert plain.final_nll == pytest.approx(bt.final_nll, abs=1e-5)


def test_fit_output_is_feasible_and_stationary(rng):
    x = rng.normal(0.5, 0.8, 500)
    t = rng.uniform(0, 0.3, 500)
    prior, report = fit(x, t, FitConfig(N=10, tol=1e-13, max_iters=20000))
    assert kappa(10) * prior.f.sum() == pytest.approx(1.0, abs=1e-12)
    assert prior.f.min() >= 0
    assert report.pg_norm == pytest.approx(projected_gradient_norm(prior.f, x, t), rel=1e-3, abs=1e-6)
    # first-order optimality, relative to the gradient scale
    assert report.pg_norm <= 1e-3 * np.abs(gradient_nll(prior.f, x, t)).max()
    assert report.final_nll == pytest.approx(neg_log_likelihood(prior.f, x, t), rel=1e-9)


def test_fit_is_deterministic(rng):
    x = rng.normal(0, 1, 100)
    t = rng.uniform(0, 0.2, 100)
    a, _ = fit(x, t, FitConfig(N=5))
    b, _ = fit(x, t, FitConfig(N=5))
    assert np.array_equal(a.f, b.f)


def test_basis_agrees_with_direct_sum(rng):
    x = rng.uniform(-3, 3, 6)
    t = rng.uniform(0, 1, 6)
    B = heat_basis(x, t, 3)
    f = rng.random(7)
    assert np.allclose(B @ f, direct_density(f, x, t), atol=1e-13)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(N=0)
    with pytest.raises(ValueError):
        FitConfig(N=2, step_size="armijo")
    with pytest.raises(ValueError):
        FitConfig(N=2, step_size=-1.0)
    with pytest.raises(ValueError):
        FitConfig(N=2, tol=0.0)


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit(np.zeros(3), np.zeros(2), FitConfig(N=2))
    with pytest.raises(ValueError):
        fit(np.zeros(3), -np.ones(3), FitConfig(N=2))
    with pytest.raises(ValueError):
        fista(np.ones((3, 4)), FitConfig(N=2))


@pytest.mark.xfail(strict=True, reason="converged N=32 fit oscillates by 0.06-0.10 around 1/8; see decisions ledger")
def test_fit_records_recovers_uniform_prior():
    rng = np.random.default_rng(7)
    d = rng.uniform(-4, 4, 2000)
    s = rng.uniform(0, 1, 2000)
    prior, _ = fit_records(d + s * rng.standard_normal(2000), s, 32, L=8.0)
    grid = np.linspace(-3.5, 3.5, 141)
    u = (grid - prior.domain.x0) * prior.domain.scale
    raw = eval_density(prior, u) * prior.domain.scale
    assert np.max(np.abs(raw - 1 / 8)) <= 0.03


def test_smaller_order_recovers_uniform_prior_closely():
    rng = np.random.default_rng(7)
    d = rng.uniform(-4, 4, 2000)
    s = rng.uniform(0, 1, 2000)
    prior, _ = fit_records(d + s * rng.standard_normal(2000), s, 16, L=8.0)
    grid = np.linspace(-3.5, 3.5, 141)
    raw = eval_density(prior, (grid - prior.domain.x0) * prior.domain.scale) * prior.domain.scale
    assert np.max(np.abs(raw - 1 / 8)) <= 0.05
    # the mass inside the true support is close to one
    fine = np.linspace(-4, 4, 4001)
    inside = np.trapezoid(eval_density(prior, (fine - prior.domain.x0) * prior.domain.scale), fine) * prior.domain.scale
    assert inside == pytest.approx(1.0, abs=0.05)


def test_fit_records_config_mismatch():
    with pytest.raises(ValueError):
        fit_records([0.0, 1.0], [1.0, 1.0], 3, config=FitConfig(N=4))


def test_fitted_prior_type():
    prior, _ = fit_records(np.linspace(-1, 1, 30), np.full(30, 0.1), 4)
    assert isinstance(prior, SpectralPrior) and prior.domain is not None
