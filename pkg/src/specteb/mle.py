"""Maximum-likelihood fitting of spectral priors by accelerated projected gradient.

The negative log-likelihood ``-sum_i log C_{N,f}(x_i; t_i)`` is convex in the
node values ``f``, and the feasible set ``{f : kappa_N f in simplex}`` has an
exact Euclidean projection, so FISTA applies directly.  Internally the solver
works with the per-point mean objective; that is the scale a fixed
``step_size`` refers to.  Reported objective values are plain sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .core import DomainSpec, make_domain, default_half_length, rescale_arrays
from .spectral import SpectralPrior, heat_basis, kappa

logger = logging.getLogger(__name__)

# consecutive small-change iterations required before declaring convergence
_PATIENCE = 5


@dataclass(frozen=True)
class FitConfig:
    N: int
    max_iters: int = 5000
    step_size: Union[float, str] = "backtracking"
    tol: float = 1e-8
    restart: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("order N must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if isinstance(self.step_size, str):
            if self.step_size != "backtracking":
                raise ValueError(f"unknown step rule {self.step_size!r}")
        elif not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass
class FitReport:
    final_nll: float
    iterations: int
    objective_trace: np.ndarray
    converged: bool
    step_size: float = float("nan")
    restarts: int = 0
    pg_norm: float = float("nan")
    extra: dict = field(default_factory=dict)


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = 1}`` by sort and threshold.

    With ``y`` sorted in decreasing order, ``rho`` is the largest ``j`` such
    that ``y_(j) + (1 - sum_{i<=j} y_(i)) / j > 0`` and the projection is
    ``max(y + lambda, 0)`` with ``lambda = (1 - sum_{i<=rho} y_(i)) / rho``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("expected a non-empty 1-d vector")
    u = np.sort(y)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, y.size + 1)
    rho = np.flatnonzero(u + (1.0 - css) / j > 0)[-1] + 1
    lam = (1.0 - css[rho - 1]) / rho
    return np.maximum(y + lam, 0.0)


def _project_nodes(f, N):
    k = kappa(N)
    return project_simplex(k * f) / k


def _densities(B, f):
    return B @ f


def neg_log_likelihood(f, x, t, N: int | None = None, basis: np.ndarray | None = None) -> float:
    """``-sum_i log C_{N,f}(x_i; t_i)``; ``+inf`` if any density is non-positive."""
    f = np.asarray(f, dtype=float)
    N = (f.size - 1) // 2 if N is None else N
    if f.shape != (2 * N + 1,):
        raise ValueError(f"node vector has shape {f.shape}, expected ({2 * N + 1},)")
    B = heat_basis(x, t, N) if basis is None else basis
    if B.shape[1] != f.size:
        raise ValueError("basis and node vector dimensions differ")
    p = _densities(B, f)
    if np.any(p <= 0):
        return float("inf")
    return float(-np.sum(np.log(p)))


def gradient_nll(f, x, t, N: int | None = None, basis: np.ndarray | None = None) -> np.ndarray:
    """Gradient of :func:`neg_log_likelihood` with respect to ``f``: ``-B^T (1 / B f)``."""
    f = np.asarray(f, dtype=float)
    N = (f.size - 1) // 2 if N is None else N
    B = heat_basis(x, t, N) if basis is None else basis
    p = _densities(B, f)
    if np.any(p <= 0):
        raise ValueError("vanishing density at a data point; gradient undefined")
    return -(B.T @ (1.0 / p))


def projected_gradient_norm(f, x, t, N: int | None = None, basis: np.ndarray | None = None) -> float:
    """``||f - kappa^-1 proj(kappa (f - grad))||``; zero exactly at the constrained optimum."""
    f = np.asarray(f, dtype=float)
    N = (f.size - 1) // 2 if N is None else N
    g = gradient_nll(f, x, t, N, basis)
    return float(np.linalg.norm(f - _project_nodes(f - g, N)))


class _MeanNLL:
    """Mean negative log-likelihood over a fixed basis."""

    def __init__(self, B):
        self.B = B
        self.n = B.shape[0]

    def value(self, f):
        p = self.B @ f
        if np.any(p <= 0):
            return np.inf
        return -np.mean(np.log(p))

    def value_grad(self, f):
        p = self.B @ f
        if np.any(p <= 0):
            return np.inf, None
        return -np.mean(np.log(p)), -(self.B.T @ (1.0 / p)) / self.n


def fista(B: np.ndarray, config: FitConfig, f0: np.ndarray | None = None) -> tuple[np.ndarray, FitReport]:
    """Run accelerated projected gradient on a precomputed basis ``B`` (rows = data points)."""
    N = config.N
    if B.shape[1] != 2 * N + 1:
        raise ValueError("basis width does not match the configured order")
    obj = _MeanNLL(B)
    n = obj.n
    # uniform density: f_nu = 1 / (2 pi), so that kappa_N * sum(f) = 1
    f = np.full(2 * N + 1, 1.0 / (2.0 * np.pi)) if f0 is None else np.asarray(f0, dtype=float).copy()
    f_prev = f.copy()
    F = obj.value(f)
    if not np.isfinite(F):
        raise ValueError("objective is not finite at the initial point")

    backtrack = config.step_size == "backtracking"
    gamma = 1.0 if backtrack else float(config.step_size)
    trace = [n * F]
    m = 1
    calm = 0
    restarts = 0
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        y = f + (m - 2.0) / (m + 1.0) * (f - f_prev)
        Fy, g = obj.value_grad(y)
        if g is None:
            # extrapolation left the region where the density is positive
            y, m = f, 1
            f_prev = f.copy()
            Fy, g = obj.value_grad(y)
        while True:
            f_new = _project_nodes(y - gamma * g, N)
            F_new = obj.value(f_new)
            if not backtrack:
                break
            d = f_new - y
            if F_new <= Fy + g @ d + (d @ d) / (2.0 * gamma):
                break
            gamma *= 0.5
            if gamma < 1e-300:
                raise RuntimeError("line search failed to find a descent step")

        if config.restart and F_new > F:
            # reject the step and drop momentum; the next step is a plain projected gradient
            restarts += 1
            f_prev = f.copy()
            m = 1
            trace.append(n * F)
            continue

        change = abs(F - F_new) / max(abs(F), 1e-300)
        f_prev, f = f, f_new
        F = F_new
        m += 1
        trace.append(n * F)
        calm = calm + 1 if change < config.tol else 0
        if calm >= _PATIENCE:
            converged = True
            break

    report = FitReport(
        final_nll=float(n * F),
        iterations=it,
        objective_trace=np.asarray(trace),
        converged=converged,
        step_size=gamma,
        restarts=restarts,
    )
    if not converged:
        logger.info("FISTA stopped at max_iters=%d without meeting tol=%g", config.max_iters, config.tol)
    return f, report


def fit(x, t, config: FitConfig, domain: DomainSpec | None = None) -> tuple[SpectralPrior, FitReport]:
    """Fit node values to torus-scale data ``(x_i, t_i)``."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.shape != t.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("x and t must be non-empty 1-d arrays of equal length")
    if np.any(t < 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(t)):
        raise ValueError("t must be non-negative and all data finite")
    B = heat_basis(x, t, config.N)
    f, report = fista(B, config)
    report.pg_norm = projected_gradient_norm(f, x, t, config.N, basis=B)
    # the iterate sits on the scaled simplex up to rounding; renormalize before freezing
    f = np.maximum(f, 0.0)
    f /= kappa(config.N) * f.sum()
    return SpectralPrior(config.N, f, domain), report


def fit_records(
    delta_hat,
    s,
    N: int,
    L: float | None = None,
    x0: float | None = None,
    config: FitConfig | None = None,
    project: bool = True,
) -> tuple[SpectralPrior, FitReport]:
    """Raw-unit convenience wrapper: build the domain, rescale, and fit."""
    delta_hat = np.asarray(delta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    if L is None:
        L = default_half_length((delta_hat, s), x0)
    domain = make_domain((delta_hat, s), L, x0)
    x, t = rescale_arrays(delta_hat, s, domain, project=project)
    config = FitConfig(N=N) if config is None else config
    if config.N != N:
        raise ValueError("config.N disagrees with N")
    return fit(x, t, config, domain)
