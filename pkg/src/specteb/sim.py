"""Synthetic experiments under known priors, quadrature marginals, and the aliasing bound."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gmm import GmmPrior

# images kept on each side of the wrapped Gaussian
WRAP_IMAGES = 8


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """A known prior on ``[x0 - L, x0 + L]``.

    ``kind`` is ``"uniform"`` (``a < b``), ``"gmm"`` (``gmm``), or
    ``"tabulated"`` (``grid`` with density ``values``, piecewise linear).
    """

    kind: str
    x0: float = 0.0
    L: float = 1.0
    a: float = 0.0
    b: float = 0.0
    gmm: Optional[GmmPrior] = None
    grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.kind == "uniform":
            if not self.a < self.b:
                raise ValueError("uniform prior needs a < b")
        elif self.kind == "gmm":
            if self.gmm is None:
                raise ValueError("gmm prior needs a GmmPrior")
            if np.any(self.gmm.V <= 0):
                raise ValueError("gmm prior components must have positive variance")
        elif self.kind == "tabulated":
            grid = np.asarray(self.grid, dtype=float)
            values = np.asarray(self.values, dtype=float)
            if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2 or np.any(np.diff(grid) <= 0):
                raise ValueError("tabulated prior needs an increasing grid and matching values")
            if np.any(values < 0):
                raise ValueError("tabulated density must be non-negative")
            mass = np.trapezoid(values, grid)
            if not mass > 0:
                raise ValueError("tabulated density has zero mass")
            object.__setattr__(self, "grid", grid)
            object.__setattr__(self, "values", values / mass)
        else:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def uniform(cls, a, b, x0=0.0, L=None):
        return cls("uniform", x0=x0, L=L if L is not None else max(abs(a - x0), abs(b - x0)), a=a, b=b)

    @classmethod
    def mixture(cls, gmm: GmmPrior, x0=0.0, L=1.0):
        return cls("gmm", x0=x0, L=L, gmm=gmm)

    @classmethod
    def tabulated(cls, grid, values, x0=0.0, L=1.0):
        return cls("tabulated", x0=x0, L=L, grid=grid, values=values)

    def density(self, delta) -> np.ndarray:
        delta = np.asarray(delta, dtype=float)
        if self.kind == "uniform":
            return np.where((delta >= self.a) & (delta <= self.b), 1.0 / (self.b - self.a), 0.0)
        if self.kind == "gmm":
            return self.gmm.density(delta)
        return np.interp(delta, self.grid, self.values, left=0.0, right=0.0)

    def support(self) -> tuple[float, float]:
        """Interval holding all (or, for mixtures, all but ~1e-16 of) the mass."""
        if self.kind == "uniform":
            return self.a, self.b
        if self.kind == "tabulated":
            return float(self.grid[0]), float(self.grid[-1])
        sd = np.sqrt(self.gmm.V)
        return float(np.min(self.gmm.mu - 9 * sd)), float(np.max(self.gmm.mu + 9 * sd))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        if self.kind == "gmm":
            k = rng.choice(self.gmm.K, size=n, p=self.gmm.alpha)
            return self.gmm.mu[k] + np.sqrt(self.gmm.V[k]) * rng.standard_normal(n)
        # inverse CDF of the piecewise-linear density
        g, v = self.grid, self.values
        cell = 0.5 * (v[1:] + v[:-1]) * np.diff(g)
        cdf = np.concatenate([[0.0], np.cumsum(cell)])
        cdf /= cdf[-1]
        u = rng.random(n)
        j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, g.size - 2)
        h = g[j + 1] - g[j]
        slope = (v[j + 1] - v[j]) / h
        r = u - cdf[j]
        # solve v_j z + slope z^2 / 2 = r for z in [0, h]
        disc = np.maximum(v[j] ** 2 + 2.0 * slope * r, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(np.abs(slope) > 1e-14, (np.sqrt(disc) - v[j]) / slope, r / np.where(v[j] > 0, v[j], 1.0))
        return g[j] + np.clip(z, 0.0, h)


@dataclass(frozen=True)
class NoiseLaw:
    """Distribution of noise scales: ``uniform(lo, hi)``, ``fixed(value)`` or ``tabulated(values)``."""

    kind: str
    lo: float = 0.0
    hi: float = 0.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform":
            if not 0 <= self.lo <= self.hi:
                raise ValueError("uniform noise law needs 0 <= lo <= hi")
        elif self.kind == "fixed":
            if not self.lo >= 0:
                raise ValueError("fixed noise scale must be non-negative")
        elif self.kind == "tabulated":
            if len(self.values) == 0 or min(self.values) < 0:
                raise ValueError("tabulated noise scales must be a non-empty non-negative list")
        else:
            raise ValueError(f"unknown noise law {self.kind!r}")

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def fixed(cls, value):
        return cls("fixed", lo=value, hi=value)

    @classmethod
    def tabulated(cls, values):
        return cls("tabulated", values=tuple(float(v) for v in values))

    def sample(self, n, rng):
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, n)
        if self.kind == "fixed":
            return np.full(n, float(self.lo))
        return rng.choice(np.asarray(self.values), size=n)


@dataclass
class SimulatedData:
    delta: np.ndarray
    delta_hat: np.ndarray
    s: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta_hat", "s", "delta_true"])
        for row in zip(self.delta_hat, self.s, self.delta):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def wrap_interval(v, x0, L):
    """Map values onto ``[x0 - L, x0 + L)`` periodically."""
    return x0 - L + np.mod(np.asarray(v, dtype=float) - (x0 - L), 2.0 * L)


def sample_experiments(prior: PriorSpec, n: int, s_law: NoiseLaw, mode: str = "real_line", seed=0) -> SimulatedData:
    """Draw ``(delta, delta_hat, s)``: effects from ``prior``, Gaussian noise of scale ``s``.

    In ``torus`` mode ``delta_hat`` is wrapped back into the domain, which is
    the same as drawing it from the periodized convolution.
    """
    if mode not in ("real_line", "torus"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    delta = prior.sample(n, rng)
    s = s_law.sample(n, rng)
    delta_hat = delta + s * rng.standard_normal(n)
    if mode == "torus":
        delta_hat = wrap_interval(delta_hat, prior.x0, prior.L)
        # noiseless draws already lie in the domain; keep them bit-identical
        delta_hat = np.where(s == 0, delta, delta_hat)
    return SimulatedData(delta, delta_hat, s)


def oracle_marginal(prior: PriorSpec, x, t: float, mode: str = "real_line", grid_size: int = 4096) -> np.ndarray:
    """Density of ``delta_hat`` at ``x`` (raw units) for noise variance ``t``.

    The convolution is computed by composite Simpson quadrature over the
    prior's support; the torus mode sums ``|m| <= 8`` periodic images of the
    Gaussian kernel with period ``2 L``.
    """
    if mode not in ("real_line", "torus"):
        raise ValueError(f"unknown mode {mode!r}")
    if t < 0:
        raise ValueError("t must be non-negative")
    x = np.asarray(x, dtype=float)
    if t == 0:
        if mode == "torus":
            return prior.density(wrap_interval(x, prior.x0, prior.L))
        return prior.density(x)
    lo, hi = prior.support()
    sd = math.sqrt(t)
    shifts = 2.0 * prior.L * np.arange(-WRAP_IMAGES, WRAP_IMAGES + 1) if mode == "torus" else np.zeros(1)
    out = np.zeros(x.shape)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i, xi in enumerate(flat):
        total = 0.0
        for sh in shifts:
            c = xi + sh
            # clip to where the kernel is not negligible
            a, b = max(lo, c - 40 * sd), min(hi, c + 40 * sd)
            if b <= a:
                continue
            total += _simpson(lambda u: prior.density(u) * np.exp(-0.5 * ((c - u) / sd) ** 2), a, b, grid_size,
                              breaks=_breaks(prior, a, b))
        res[i] = total / (sd * math.sqrt(2.0 * math.pi))
    return out


def _breaks(prior, a, b):
    if prior.kind == "tabulated":
        g = prior.grid
        return g[(g > a) & (g < b)]
    return np.empty(0)


def _simpson(fn, a, b, m, breaks=()):
    """Composite Simpson rule with ``m`` panels per piece, split at ``breaks``."""
    pts = np.concatenate([[a], np.asarray(breaks, dtype=float), [b]])
    total = 0.0
    m = m + (m % 2)
    per = max(2, (m // (pts.size - 1)) // 2 * 2)
    for lo, hi in zip(pts[:-1], pts[1:]):
        u = np.linspace(lo, hi, per + 1)
        w = np.ones(per + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        total += float(w @ fn(u)) * (hi - lo) / (3.0 * per)
    return total


def aliasing_bound(L: float, t_max: float) -> float:
    """Upper bound on the torus-minus-real-line marginal gap: ``sqrt(2/pi) / (sqrt(t_max) (exp(2 L^2 / t_max) - 1))``."""
    if not (L > 0 and t_max > 0):
        raise ValueError("L and t_max must be positive")
    arg = 2.0 * L * L / t_max
    if arg > 700:
        return 0.0
    return math.sqrt(2.0 / math.pi) / (math.sqrt(t_max) * math.expm1(arg))


def half_length_for_bound(t_max: float, bound: float) -> float:
    """Smallest ``L`` with ``aliasing_bound(L, t_max) <= bound``."""
    # exp(2 L^2 / t) - 1 = sqrt(2/pi) / (sqrt(t) bound)
    target = math.sqrt(2.0 / math.pi) / (math.sqrt(t_max) * bound)
    return math.sqrt(0.5 * t_max * math.log1p(target))
