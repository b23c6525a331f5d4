"""Posterior inference for experiment effects under a fitted spectral prior.

Tweedie's formulas give the posterior mean and variance from the first two
derivatives of the log marginal density ``l_s = log p_s``:

    E[Delta | Delta_hat]   = Delta_hat + s^2 l_s'(Delta_hat)
    Var[Delta | Delta_hat] = s^2 (1 + s^2 l_s''(Delta_hat))

Both are computed on the torus and mapped back to raw units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DomainSpec, ExperimentRecord, rescale_arrays
from .spectral import TWO_PI, SpectralPrior, eval_density, eval_density_derivs, sample_torus, wrap

# images kept on each side when wrapping a Gaussian onto the torus
WRAP_IMAGES = 8


@dataclass
class PosteriorSummary:
    mean: float
    variance: float
    shrinkage: float
    density_grid: Optional[tuple[np.ndarray, np.ndarray]] = None
    launch: Optional[bool] = None


def _domain(prior: SpectralPrior) -> DomainSpec:
    if prior.domain is None:
        raise ValueError("prior has no domain; raw-unit inference needs one")
    return prior.domain


def posterior_moments(prior: SpectralPrior, delta_hat, s, project: bool = False):
    """Vectorized Tweedie mean and variance in raw units.

    Records with ``s = 0`` get mean ``delta_hat`` and variance ``0`` without
    touching the density.
    """
    domain = _domain(prior)
    delta_hat = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    s = np.broadcast_to(np.asarray(s, dtype=float), delta_hat.shape)
    x, t = rescale_arrays(delta_hat, s, domain, project=project)
    mean = delta_hat.copy()
    var = np.zeros_like(delta_hat)
    noisy = t > 0
    if noisy.any():
        C, C1, C2 = eval_density_derivs(prior, x[noisy], t[noisy])
        C, C1, C2 = np.atleast_1d(C), np.atleast_1d(C1), np.atleast_1d(C2)
        if np.any(C <= 0):
            raise ValueError("vanishing marginal density; posterior undefined")
        score = C1 / C
        curv = C2 / C - score**2
        back = 1.0 / domain.scale
        tn = t[noisy]
        if project:
            # projected records are scored at their projected location
            mean[noisy] = domain.x0 + back * (x[noisy] + tn * score)
        else:
            mean[noisy] = delta_hat[noisy] + back * tn * score
        var[noisy] = back**2 * tn * (1.0 + tn * curv)
    return mean, var


def tweedie_mean(prior: SpectralPrior, record: ExperimentRecord) -> float:
    mean, _ = posterior_moments(prior, record.delta_hat, record.s)
    return float(mean[0])


def tweedie_variance(prior: SpectralPrior, record: ExperimentRecord) -> float:
    _, var = posterior_moments(prior, record.delta_hat, record.s)
    return float(var[0])


def wrapped_gaussian(d, t, images: int = WRAP_IMAGES):
    """Gaussian density of variance ``t`` wrapped onto a circle of length ``2 pi``."""
    d = np.asarray(d, dtype=float)
    sd = math.sqrt(t)
    m = np.arange(-images, images + 1)
    z = (d[..., None] + TWO_PI * m) / sd
    return np.exp(-0.5 * z * z).sum(axis=-1) / (sd * math.sqrt(TWO_PI))


def posterior_density(prior: SpectralPrior, record: ExperimentRecord, grid_size: int = 512):
    """Posterior density of the true effect on a midpoint grid over the raw domain.

    Returns ``(grid, values)`` with ``sum(values) * h == 1``.  With ``s = 0`` all
    mass sits in the bin containing ``delta_hat``.
    """
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    domain = _domain(prior)
    lo, hi = domain.bounds
    h = (hi - lo) / grid_size
    grid = lo + (np.arange(grid_size) + 0.5) * h
    (x,), (t,) = rescale_arrays([record.delta_hat], [record.s], domain)
    values = np.zeros(grid_size)
    if t == 0:
        j = min(int((record.delta_hat - lo) // h), grid_size - 1)
        values[j] = 1.0 / h
        return grid, values
    u = (grid - domain.x0) * domain.scale
    unnorm = np.asarray(eval_density(prior, u, 0.0)) * wrapped_gaussian(x - u, t)
    total = unnorm.sum() * h
    if not total > 0:
        raise ValueError("vanishing posterior normalizer")
    return grid, unnorm / total


def decide_launch(prior: SpectralPrior, record: ExperimentRecord, cost: float) -> bool:
    """Launch iff the posterior mean strictly exceeds ``cost``."""
    if cost < 0:
        raise ValueError("cost must be non-negative")
    return tweedie_mean(prior, record) > cost


def summarize(prior: SpectralPrior, record: ExperimentRecord, cost: float | None = None,
              grid_size: int | None = None) -> PosteriorSummary:
    mean, var = posterior_moments(prior, record.delta_hat, record.s)
    mean, var = float(mean[0]), float(var[0])
    grid = posterior_density(prior, record, grid_size) if grid_size else None
    launch = None if cost is None else bool(mean > cost)
    return PosteriorSummary(mean=mean, variance=var, shrinkage=mean - record.delta_hat,
                            density_grid=grid, launch=launch)


def shrinkage_curve(prior: SpectralPrior, s: float, delta_hat) -> np.ndarray:
    """``E_s[Delta | delta_hat] - delta_hat`` along a grid of observations."""
    delta_hat = np.asarray(delta_hat, dtype=float)
    mean, _ = posterior_moments(prior, delta_hat, np.full(delta_hat.shape, s))
    return mean - delta_hat


def _arc_integrals(m, a, b):
    """``int_a^b exp(i m u) du`` for integer array ``m``."""
    m = np.asarray(m, dtype=float)
    out = np.empty(m.shape, dtype=complex)
    zero = m == 0
    out[zero] = b - a
    mm = m[~zero]
    out[~zero] = (np.exp(1j * mm * b) - np.exp(1j * mm * a)) / (1j * mm)
    return out


def interval_probability_torus(prior: SpectralPrior, x, t, a: float, b: float) -> np.ndarray:
    """``P(u in [a, b] | x)`` on the torus, for ``-pi <= a <= b <= pi``.

    The numerator ``int_a^b g(u) phi_wrapped(x - u; t) du`` is summed exactly as a
    Fourier series: the wrapped Gaussian has coefficients ``exp(-j^2 t/2)/(2 pi)``
    and ``g`` is a trigonometric polynomial.  Terms beyond ``exp(-j^2 t / 2) < 1e-17``
    are dropped.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape).copy()
    if not (-math.pi <= a <= b <= math.pi):
        raise ValueError("interval must satisfy -pi <= a <= b <= pi")
    out = np.empty(x.size)
    if b - a >= TWO_PI:
        out[:] = 1.0
        return out
    if b == a:
        out[:] = 0.0
        return out
    exact = t == 0
    out[exact] = ((x[exact] >= a) & (x[exact] <= b)).astype(float)
    N = prior.N
    gamma = prior.cesaro_coefficients(0.0)
    k = np.arange(-N, N + 1)
    denom = np.asarray(eval_density(prior, x, t), dtype=float)
    order = np.flatnonzero(~exact)
    order = order[np.argsort(t[order])]
    chunk = 2048
    for lo in range(0, order.size, chunk):
        idx = order[lo:lo + chunk]
        tmin = t[idx].min()
        J = int(math.ceil(math.sqrt(2.0 * 39.2 / tmin)))
        J = min(J, 1 << 15)
        j = np.arange(-J, J + 1)
        # H_j = (1/2pi) sum_k gamma_k int_a^b e^{i (k - j) u} du
        H = (_arc_integrals(np.subtract.outer(k, j), a, b) * gamma[:, None]).sum(axis=0) / TWO_PI
        damp = np.exp(-0.5 * np.multiply.outer(t[idx], j * j))
        num = (damp * H * np.exp(1j * np.multiply.outer(x[idx], j))).sum(axis=1).real
        out[idx] = num / denom[idx]
    return np.clip(out, 0.0, 1.0)


def posterior_probability(prior: SpectralPrior, delta_hat, s, interval: tuple[float, float]) -> np.ndarray:
    """Raw-unit ``P(Delta in interval | delta_hat)``; the interval is clipped to the domain."""
    domain = _domain(prior)
    x, t = rescale_arrays(np.atleast_1d(delta_hat), np.broadcast_to(s, np.shape(np.atleast_1d(delta_hat))), domain)
    a, b = _interval_to_torus(interval, domain)
    return interval_probability_torus(prior, x, t, a, b)


def _interval_to_torus(interval, domain: DomainSpec) -> tuple[float, float]:
    lo, hi = domain.bounds
    a = max(float(interval[0]), lo)
    b = min(float(interval[1]), hi)
    if b <= a:
        return 0.0, 0.0
    return (a - domain.x0) * domain.scale, (b - domain.x0) * domain.scale


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    phi_mean: float
    count: int
    frequency: float
    se: float


def calibration_check(
    prior: SpectralPrior,
    interval: tuple[float, float],
    probe_bins: int = 10,
    sim_size: int = 100_000,
    seed: int = 0,
    s_values: Sequence[float] | None = None,
) -> list[CalibrationBin]:
    """Bin simulated posterior probabilities and compare with realized frequencies.

    True effects are drawn from ``prior`` itself, observations from the torus
    model with noise scales drawn uniformly from ``s_values`` (raw units;
    default ``L/16, L/8, L/4``).  For each occupied probability bin the table
    holds the mean posterior probability, the fraction of draws whose true
    effect fell in ``interval``, and the binomial standard error
    ``sqrt(phi (1 - phi) / count)`` evaluated at the bin's mean probability.
    Empty bins are omitted.
    """
    domain = _domain(prior)
    rng = np.random.default_rng(seed)
    if s_values is None:
        s_values = (domain.L / 16, domain.L / 8, domain.L / 4)
    s_values = np.asarray(s_values, dtype=float)
    u = sample_torus(prior, sim_size, rng)
    t = (rng.choice(s_values, size=sim_size) * domain.scale) ** 2
    x = wrap(u + np.sqrt(t) * rng.standard_normal(sim_size))
    a, b = _interval_to_torus(interval, domain)
    phi = interval_probability_torus(prior, x, t, a, b)
    inside = ((u >= a) & (u <= b)) if b > a else np.zeros(sim_size, dtype=bool)

    edges = np.linspace(0.0, 1.0, probe_bins + 1)
    which = np.clip(np.searchsorted(edges, phi, side="right") - 1, 0, probe_bins - 1)
    table = []
    for j in range(probe_bins):
        sel = which == j
        count = int(sel.sum())
        if count == 0:
            continue
        p = float(phi[sel].mean())
        table.append(CalibrationBin(
            lower=float(edges[j]), upper=float(edges[j + 1]), phi_mean=p, count=count,
            frequency=float(inside[sel].mean()), se=math.sqrt(max(p * (1.0 - p), 0.0) / count),
        ))
    return table
