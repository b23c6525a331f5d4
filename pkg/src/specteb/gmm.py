"""Gaussian-mixture prior baseline fitted by EM under heteroscedastic noise.

With prior ``sum_k alpha_k N(mu_k, V_k)`` and noise ``N(0, s_i^2)`` the marginal
of ``delta_hat_i`` is ``sum_k alpha_k N(mu_k, V_k + s_i^2)``.  EM imputes the
component label and the latent effect; given label ``k`` the latent effect is
Gaussian with mean ``b_ik`` and variance ``B_ik``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GmmPrior:
    K: int
    alpha: np.ndarray
    mu: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float)
        mu = np.array(self.mu, dtype=float)
        V = np.array(self.V, dtype=float)
        if self.K < 1 or not alpha.shape == mu.shape == V.shape == (self.K,):
            raise ValueError(f"alpha, mu, V must all have length K={self.K}")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(V))):
            raise ValueError("mixture parameters must be finite")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-8:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(V < 0):
            raise ValueError("component variances must be non-negative")
        for name, arr in (("alpha", alpha), ("mu", mu), ("V", V)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def mean(self) -> float:
        return float(self.alpha @ self.mu)

    @property
    def variance(self) -> float:
        return float(self.alpha @ (self.V + self.mu**2) - self.mean**2)

    def density(self, delta) -> np.ndarray:
        """Prior density; components with ``V = 0`` are point masses and are skipped."""
        delta = np.asarray(delta, dtype=float)
        out = np.zeros(delta.shape)
        for a, m, v in zip(self.alpha, self.mu, self.V):
            if v > 0:
                out += a * np.exp(-0.5 * (delta - m) ** 2 / v) / math.sqrt(2.0 * math.pi * v)
        return out

    def to_json(self) -> str:
        return json.dumps({"K": self.K, "alpha": self.alpha.tolist(), "mu": self.mu.tolist(), "V": self.V.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GmmPrior":
        d = json.loads(text)
        missing = [k for k in ("K", "alpha", "mu", "V") if k not in d]
        if missing:
            raise ValueError(f"GMM model JSON lacks field(s) {missing}")
        return cls(int(d["K"]), d["alpha"], d["mu"], d["V"])


def _component_logpdf(prior: GmmPrior, delta_hat, s):
    """``log alpha_k + log N(delta_hat_i; mu_k, V_k + s_i^2)`` as an ``(n, K)`` array."""
    var = prior.V[None, :] + np.asarray(s, dtype=float)[:, None] ** 2
    if np.any(var <= 0):
        raise ValueError("zero marginal variance: a point-mass component met a noiseless record")
    r = np.asarray(delta_hat, dtype=float)[:, None] - prior.mu[None, :]
    with np.errstate(divide="ignore"):
        log_alpha = np.log(prior.alpha)
    return log_alpha[None, :] - 0.5 * (_LOG_2PI + np.log(var) + r * r / var)


def gmm_marginal_ll(prior: GmmPrior, delta_hat, s) -> float:
    """``sum_i log sum_k alpha_k N(delta_hat_i; mu_k, V_k + s_i^2)``."""
    delta_hat = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    s = np.broadcast_to(np.asarray(s, dtype=float), delta_hat.shape)
    return float(logsumexp(_component_logpdf(prior, delta_hat, s), axis=1).sum())


def gmm_log_derivs(prior: GmmPrior, delta_hat, s):
    """Per-point ``(log p_s, d/dx log p_s, d2/dx2 log p_s)`` of the marginal density."""
    delta_hat = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    s = np.broadcast_to(np.asarray(s, dtype=float), delta_hat.shape)
    lp = _component_logpdf(prior, delta_hat, s)
    logp = logsumexp(lp, axis=1)
    w = np.exp(lp - logp[:, None])
    var = prior.V[None, :] + s[:, None] ** 2
    g = -(delta_hat[:, None] - prior.mu[None, :]) / var
    d1 = (w * g).sum(axis=1)
    d2 = (w * (g * g - 1.0 / var)).sum(axis=1) - d1**2
    return logp, d1, d2


def _latent_moments(mu, V, delta_hat, s2):
    """``b_ik, B_ik``: conditional mean and variance of the effect given component ``k``."""
    tot = s2[:, None] + V[None, :]
    safe = np.where(tot > 0, tot, 1.0)
    b = np.where(tot > 0, (s2[:, None] * mu[None, :] + V[None, :] * delta_hat[:, None]) / safe, mu[None, :])
    B = np.where(tot > 0, s2[:, None] * V[None, :] / safe, 0.0)
    return b, B


@dataclass
class GmmPosterior:
    alpha: np.ndarray
    mu: np.ndarray
    V: np.ndarray
    mean: float
    variance: float
    null_probability: float | None = None


def gmm_posterior(prior: GmmPrior, delta_hat: float, s: float) -> GmmPosterior:
    """Posterior of the effect: again a Gaussian mixture with updated weights, means and variances.

    If the first component is a point mass at zero its posterior weight is
    reported as ``null_probability``.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    s2 = float(s) ** 2
    x = np.array([float(delta_hat)])
    b, B = _latent_moments(prior.mu, prior.V, x, np.array([s2]))
    tot = prior.V + s2
    if np.all(tot > 0):
        lw = _component_logpdf(prior, x, np.array([s]))[0]
    else:
        # noiseless record: only point masses sitting exactly at delta_hat keep weight
        lw = np.where((tot == 0) & (prior.mu == delta_hat), np.log(np.maximum(prior.alpha, 1e-300)), -np.inf)
        if not np.isfinite(lw).any():
            lw = _component_logpdf_partial(prior, x[0], s2)
    w = np.exp(lw - logsumexp(lw))
    mu_post, V_post = b[0], B[0]
    mean = float(w @ mu_post)
    variance = float(max(w @ (V_post + mu_post**2) - mean**2, 0.0))
    null = float(w[0]) if prior.mu[0] == 0 and prior.V[0] == 0 else None
    return GmmPosterior(w, mu_post, V_post, mean, variance, null)


def _component_logpdf_partial(prior, x, s2):
    tot = prior.V + s2
    with np.errstate(divide="ignore"):
        out = np.log(prior.alpha) - 0.5 * (_LOG_2PI + np.log(np.where(tot > 0, tot, 1.0))
                                           + (x - prior.mu) ** 2 / np.where(tot > 0, tot, 1.0))
    return np.where(tot > 0, out, -np.inf)


@dataclass
class EmRun:
    prior: GmmPrior
    loglik: float
    trace: np.ndarray
    iterations: int
    converged: bool
    collapsed: bool = False
    extra: dict = field(default_factory=dict)


def em_run(
    delta_hat,
    s,
    init: GmmPrior,
    max_iters: int = 1000,
    tol: float = 1e-10,
    pin_null: bool = False,
    var_floor: float = 0.0,
) -> EmRun:
    """One EM run from ``init``; the log-likelihood is recorded after every iteration.

    Stops when the relative log-likelihood change drops below ``tol``.  With
    ``tol = 0`` it runs until the parameters stop changing or ``max_iters``.
    """
    delta_hat = np.asarray(delta_hat, dtype=float)
    s2 = np.asarray(s, dtype=float) ** 2
    n = delta_hat.size
    alpha, mu, V = init.alpha.copy(), init.mu.copy(), init.V.copy()
    prior = init
    ll = gmm_marginal_ll(prior, delta_hat, np.sqrt(s2))
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        # E-step
        lp = _component_logpdf(prior, delta_hat, np.sqrt(s2))
        q = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        b, B = _latent_moments(mu, V, delta_hat, s2)
        # M-step
        mass = q.sum(axis=0)
        if np.any(mass <= 1e-12 * n):
            return EmRun(prior, ll, np.asarray(trace), it, False, collapsed=True)
        new_alpha = mass / n
        new_mu = (q * b).sum(axis=0) / mass
        new_V = (q * ((new_mu[None, :] - b) ** 2 + B)).sum(axis=0) / mass
        new_V = np.maximum(new_V, var_floor)
        if pin_null:
            new_mu[0] = 0.0
            new_V[0] = 0.0
        new_alpha /= new_alpha.sum()
        step = max(np.max(np.abs(new_mu - mu)), np.max(np.abs(new_V - V)), np.max(np.abs(new_alpha - alpha)))
        alpha, mu, V = new_alpha, new_mu, new_V
        prior = GmmPrior(init.K, alpha, mu, V)
        new_ll = gmm_marginal_ll(prior, delta_hat, np.sqrt(s2))
        change = abs(new_ll - ll) / max(abs(ll), 1e-300)
        ll = new_ll
        trace.append(ll)
        if tol > 0 and change < tol:
            converged = True
            break
        if step == 0.0:
            converged = True
            break
    collapsed = bool(np.any((V <= var_floor) & (alpha * n < 1.0) & ~_pinned_mask(init.K, pin_null)))
    return EmRun(prior, ll, np.asarray(trace), it, converged, collapsed=collapsed)


def _pinned_mask(K, pin_null):
    m = np.zeros(K, dtype=bool)
    m[0] = pin_null
    return m


def _initial_prior(delta_hat, K, rng, pin_null):
    sd = float(np.std(delta_hat))
    var = max(sd * sd, 1e-12)
    qs = np.quantile(delta_hat, (np.arange(K) + 0.5) / K)
    mu = qs + 0.25 * sd * rng.standard_normal(K)
    V = np.full(K, var)
    if pin_null:
        mu[0] = 0.0
        V[0] = 0.0
    return GmmPrior(K, np.full(K, 1.0 / K), mu, V)


def em_fit(
    delta_hat,
    s,
    K: int,
    restarts: int = 10,
    seed: int = 0,
    max_iters: int = 1000,
    tol: float = 1e-10,
    pin_null: bool = False,
) -> tuple[GmmPrior, float]:
    """Best of ``restarts`` EM runs from jittered quantile starts.

    Returns the prior with the highest marginal log-likelihood and that value.
    Runs whose component collapses are discarded; if all collapse, raises.
    """
    delta_hat = np.asarray(delta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    if K < 1:
        raise ValueError("K must be >= 1")
    if delta_hat.size < K:
        raise ValueError(f"need at least K={K} records, got {delta_hat.size}")
    if delta_hat.shape != s.shape:
        raise ValueError("delta_hat and s must have equal length")
    if np.any(s < 0) or not (np.all(np.isfinite(delta_hat)) and np.all(np.isfinite(s))):
        raise ValueError("records must be finite with s >= 0")
    if pin_null and np.any(s == 0):
        raise ValueError("a pinned point-mass component needs s > 0 for every record")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    var_floor = 1e-10 * float(np.var(delta_hat))
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        init = _initial_prior(delta_hat, K, rng, pin_null)
        run = em_run(delta_hat, s, init, max_iters, tol, pin_null, var_floor)
        if run.collapsed:
            logger.info("EM restart %d collapsed; discarded", r)
            continue
        if best is None or run.loglik > best.loglik:
            best = run
    if best is None:
        raise RuntimeError(f"all {restarts} EM restarts collapsed for K={K}")
    return best.prior, best.loglik


def k1_stationarity_residual(delta_hat, s, mu: float, V: float) -> tuple[float, float]:
    """Residuals of the single-Gaussian likelihood equations at ``(mu, V)``.

    With weights ``w_i = 1 / (V + s_i^2)`` the score equations are
    ``sum w_i (delta_hat_i - mu) = 0`` and
    ``sum w_i^2 ((delta_hat_i - mu)^2 - s_i^2 - V) = 0``.  Both residuals are
    returned in fixed-point form, i.e. as ``mu - mu_update`` and ``V - V_update``.
    """
    delta_hat = np.asarray(delta_hat, dtype=float)
    s2 = np.asarray(s, dtype=float) ** 2
    w = 1.0 / (V + s2)
    mu_upd = float((w * delta_hat).sum() / w.sum())
    V_upd = float((w * w * ((delta_hat - mu) ** 2 - s2)).sum() / (w * w).sum())
    return mu - mu_upd, V - V_upd


def k1_moment_iteration(delta_hat, s, max_iters: int = 10_000, tol: float = 1e-14) -> tuple[float, float]:
    """Iterate the weighted-mean update for ``mu`` and the moment update for ``V``.

    ``V = mean((delta_hat - mu)^2) - mean(s^2)`` (floored at 0).  It is a
    method-of-moments equation: it coincides with the likelihood equation only
    when all ``s_i`` are equal.
    """
    delta_hat = np.asarray(delta_hat, dtype=float)
    s2 = np.asarray(s, dtype=float) ** 2
    mu, V = float(delta_hat.mean()), max(float(delta_hat.var() - s2.mean()), 0.0)
    for _ in range(max_iters):
        w = 1.0 / (V + s2)
        mu_new = float((w * delta_hat).sum() / w.sum())
        V_new = max(float(np.mean((delta_hat - mu_new) ** 2) - s2.mean()), 0.0)
        done = abs(mu_new - mu) <= tol * (1 + abs(mu)) and abs(V_new - V) <= tol * (1 + V)
        mu, V = mu_new, V_new
        if done:
            break
    return mu, V
