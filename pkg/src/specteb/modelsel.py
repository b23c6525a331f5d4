"""Monte Carlo cross-validation over the spectral order (or GMM size).

Two held-out criteria are reported for every candidate:

* the average predicted log-likelihood ``mean_i log p_hat_{s_i}(delta_hat_i)``
  (higher is better), reported on the raw data scale;
* the score-matching loss ``mean_i s_i^2 (l'^2 + 2 l'')`` evaluated with the
  fitted marginal (lower is better).  It equals, up to a constant that does not
  depend on the model, the ``s^-2``-weighted squared error of the implied
  posterior mean.  The loss is dimensionless, so torus and raw scales agree.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DomainSpec
from .mle import FitConfig, fista
from .spectral import SpectralPrior, eval_density_derivs, heat_basis

logger = logging.getLogger(__name__)

WORKERS_ENV = "SPECTEB_WORKERS"


@dataclass
class CvResult:
    candidate: int
    kind: str
    loglik_mean: float
    loglik_se: float
    score_mean: float
    score_se: float
    splits: int
    loglik_splits: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    score_splits: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    failures: int = 0
    excluded_zero_noise: int = 0
    nonpositive_density: int = 0


def predicted_log_likelihood(model: SpectralPrior, x, t, domain: DomainSpec | None = None) -> float:
    """Held-out average log marginal density.

    Torus scale unless ``domain`` is given, in which case ``log(pi / L)`` is
    added per point to express it per raw unit.  Non-positive densities give
    ``-inf``.
    """
    ll, _ = _pointwise_loglik(model, x, t)
    value = float(np.mean(ll))
    if domain is not None:
        value += math.log(domain.scale)
    return value


def _pointwise_loglik(model, x, t):
    C = np.atleast_1d(np.asarray(eval_density_derivs(model, x, t, order=0)[0], dtype=float))
    bad = C <= 0
    with np.errstate(divide="ignore"):
        ll = np.where(bad, -np.inf, np.log(np.where(bad, 1.0, C)))
    return ll, int(bad.sum())


def score_matching_loss(model: SpectralPrior, x, t) -> tuple[float, int]:
    """Return ``(loss, excluded)``; points with ``t = 0`` are excluded and counted."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    keep = t > 0
    if not keep.any():
        return float("nan"), int(x.size)
    C, C1, C2 = (np.atleast_1d(np.asarray(v)) for v in eval_density_derivs(model, x[keep], t[keep]))
    return float(_score_terms(C, C1, C2, t[keep]).mean()), int((~keep).sum())


def _score_terms(C, C1, C2, t):
    score = C1 / C
    curv = C2 / C - score**2
    return t * (score**2 + 2.0 * curv)


def split_indices(n: int, holdout_frac: float, seed: int, split: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test indices for split ``split``; depends only on ``(seed, split)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, split])))
    n_test = max(1, int(round(holdout_frac * n)))
    if n_test >= n:
        raise ValueError("hold-out fraction leaves no training data")
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _aggregate(label, kind, ll, sm, failures, excluded, nonpos):
    ll = np.asarray(ll, dtype=float)
    sm = np.asarray(sm, dtype=float)

    def mean_se(v):
        v = v[np.isfinite(v)] if np.isfinite(v).any() else v
        if v.size == 0:
            return float("nan"), float("nan")
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(np.mean(v)), se

    llm, lls = mean_se(ll)
    smm, sms = mean_se(sm)
    return CvResult(label, kind, llm, lls, smm, sms, int(ll.size), ll, sm, failures, excluded, nonpos)


def _spectral_candidate(N, x, t, splits, holdout_frac, seed, log_scale, config_kw):
    B0 = heat_basis(x, t, N)
    config = FitConfig(N=N, **config_kw)
    ll, sm = [], []
    failures = excluded = nonpos = 0
    for j in range(splits):
        train, test = split_indices(x.size, holdout_frac, seed, j)
        try:
            f, _ = fista(B0[train], config)
        except (ValueError, RuntimeError) as exc:
            logger.warning("fit failed for N=%d split %d: %s", N, j, exc)
            failures += 1
            ll.append(np.nan)
            sm.append(np.nan)
            continue
        p = B0[test] @ f
        bad = p <= 0
        nonpos += int(bad.sum())
        with np.errstate(divide="ignore"):
            ll.append(float(np.mean(np.where(bad, -np.inf, np.log(np.where(bad, 1.0, p))))) + log_scale)
        keep = test[t[test] > 0]
        excluded += int(test.size - keep.size)
        if keep.size:
            C = B0[keep] @ f
            C1 = heat_basis(x[keep], t[keep], N, 1) @ f
            C2 = heat_basis(x[keep], t[keep], N, 2) @ f
            sm.append(float(_score_terms(C, C1, C2, t[keep]).mean()))
        else:
            sm.append(np.nan)
    return _aggregate(N, "spectral", ll, sm, failures, excluded, nonpos)


def _gmm_candidate(K, delta_hat, s, splits, holdout_frac, seed, gmm_kw):
    from .gmm import em_fit, gmm_log_derivs

    ll, sm = [], []
    failures = excluded = 0
    for j in range(splits):
        train, test = split_indices(delta_hat.size, holdout_frac, seed, j)
        try:
            prior, _ = em_fit(delta_hat[train], s[train], K, seed=seed + j, **gmm_kw)
        except (ValueError, RuntimeError) as exc:
            logger.warning("EM failed for K=%d split %d: %s", K, j, exc)
            failures += 1
            ll.append(np.nan)
            sm.append(np.nan)
            continue
        logp, d1, d2 = gmm_log_derivs(prior, delta_hat[test], s[test])
        ll.append(float(np.mean(logp)))
        keep = s[test] > 0
        excluded += int((~keep).sum())
        tt = s[test][keep] ** 2
        sm.append(float(np.mean(tt * (d1[keep] ** 2 + 2.0 * d2[keep]))) if keep.any() else np.nan)
    return _aggregate(K, "gmm", ll, sm, failures, excluded, 0)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def monte_carlo_cv(
    x,
    t,
    candidates: Sequence[int],
    splits: int = 100,
    holdout_frac: float = 0.1,
    seed: int = 0,
    domain: DomainSpec | None = None,
    workers: int | None = None,
    **config_kw,
) -> list[CvResult]:
    """Paired Monte Carlo CV over spectral orders on torus-scale data.

    Split ``j`` uses the same train/test partition for every candidate.  With
    ``domain`` the log-likelihood is reported per raw unit.
    """
    if not 0 < holdout_frac < 1:
        raise ValueError("holdout_frac must lie in (0, 1)")
    if splits < 1:
        raise ValueError("splits must be >= 1")
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    log_scale = math.log(domain.scale) if domain is not None else 0.0
    args = [(N, x, t, splits, holdout_frac, seed, log_scale, config_kw) for N in candidates]
    return _run(_spectral_candidate, args, workers)


def monte_carlo_cv_gmm(
    delta_hat,
    s,
    candidates: Sequence[int],
    splits: int = 100,
    holdout_frac: float = 0.1,
    seed: int = 0,
    workers: int | None = None,
    **gmm_kw,
) -> list[CvResult]:
    """Same protocol for Gaussian-mixture priors on raw data."""
    if not 0 < holdout_frac < 1:
        raise ValueError("holdout_frac must lie in (0, 1)")
    if splits < 1:
        raise ValueError("splits must be >= 1")
    delta_hat = np.asarray(delta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    args = [(K, delta_hat, s, splits, holdout_frac, seed, gmm_kw) for K in candidates]
    return _run(_gmm_candidate, args, workers)


def _run(fn, args, workers):
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [fut.result() for fut in futures]


def select(results: Sequence[CvResult]) -> tuple[int, int]:
    """``(argmax log-likelihood, argmin score loss)``; ties go to the smaller candidate."""
    ordered = sorted(results, key=lambda r: r.candidate)
    best_ll = max(ordered, key=lambda r: (r.loglik_mean, -r.candidate))
    best_sm = min(ordered, key=lambda r: (r.score_mean, r.candidate))
    return best_ll.candidate, best_sm.candidate


CSV_FIELDS = ("candidate", "criterion", "mean", "se", "splits")


def cv_to_csv(results: Sequence[CvResult]) -> str:
    """Rows ``candidate,criterion,mean,se,splits``; the SE is left empty for a single split."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in results:
        label = r.candidate if r.kind == "spectral" else f"K{r.candidate}"
        for crit, mean, se in (("loglik", r.loglik_mean, r.loglik_se), ("score", r.score_mean, r.score_se)):
            w.writerow([label, crit, repr(mean), "" if r.splits < 2 else repr(se), r.splits])
    return buf.getvalue()


def cv_from_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        if tuple(row) != CSV_FIELDS:
            raise ValueError(f"unexpected CV CSV columns {list(row)}")
        row["mean"] = float(row["mean"])
        row["se"] = float(row["se"]) if row["se"] else None
        row["splits"] = int(row["splits"])
    return rows
