"""Heat-evolved Cesaro (Fejer) trigonometric densities on the torus [-pi, pi].

A model of order ``N`` is parametrized by node values ``f_nu`` at the
equidistant nodes ``x_nu = 2 pi nu / (2N + 1)``, ``nu = -N..N``.  Its Fourier
coefficients are the DFT of ``f`` and the density family is

    C_N(x; t) = sum_k (1 - |k| / (N + 1)) c_k exp(-k^2 t / 2) exp(i k x),

which is a mixture of shifted Fejer kernels whenever ``kappa_N f`` lies on the
unit simplex (``kappa_N = 2 pi / (2N + 1)``), hence a bona fide density.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import DomainSpec

TWO_PI = 2.0 * math.pi
# below this |sin(u/2)| the closed kernel forms lose precision
_SINGULAR = 1e-8
# entries per chunk when evaluating n x N trigonometric tables
_CHUNK = 1 << 20


def kappa(N: int) -> float:
    return TWO_PI / (2 * N + 1)


def nodes(N: int) -> np.ndarray:
    """Equidistant interpolation nodes ``x_nu = 2 pi nu / (2N+1)``, ascending."""
    if N < 1:
        raise ValueError(f"order N must be >= 1, got {N}")
    nu = np.arange(-N, N + 1)
    return TWO_PI * nu / (2 * N + 1)


def _cosine_series(u, weights):
    k = np.arange(1, len(weights) + 1)
    return 1.0 + 2.0 * np.cos(np.multiply.outer(u, k)) @ weights


def dirichlet_kernel(u, N: int):
    """Dirichlet kernel ``1 + 2 sum_{k<=N} cos(k u)``."""
    u = np.asarray(u, dtype=float)
    if N == 0:
        return np.ones_like(u)[()]
    half = np.sin(u / 2.0)
    near = np.abs(half) < _SINGULAR
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sin((N + 0.5) * u) / half
    if near.any():
        out = np.where(near, _cosine_series(u, np.ones(N)), out)
    return out[()]


def fejer_kernel(u, N: int):
    """Fejer kernel ``(sin((N+1)u/2) / sin(u/2))^2 / (N+1)``; equals ``N+1`` at ``u = 0``."""
    u = np.asarray(u, dtype=float)
    half = np.sin(u / 2.0)
    near = np.abs(half) < _SINGULAR
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (np.sin((N + 1) * u / 2.0) / half) ** 2 / (N + 1)
    if near.any():
        k = np.arange(1, N + 1)
        out = np.where(near, _cosine_series(u, 1.0 - k / (N + 1)), out)
    return out[()]


def dft_nodes_to_coeffs(f) -> np.ndarray:
    """Coefficients ``c_k = (2N+1)^-1 sum_nu f_nu exp(-2 pi i k nu / (2N+1))`` for ``k = -N..N``."""
    f = np.asarray(f)
    if f.ndim != 1 or f.size % 2 == 0:
        raise ValueError(f"node vector must be 1-d with odd length 2N+1, got shape {f.shape}")
    M = f.size
    return np.fft.fftshift(np.fft.fft(np.fft.ifftshift(f))) / M


def coeffs_to_nodes(c) -> np.ndarray:
    """Inverse of :func:`dft_nodes_to_coeffs`; real part is returned for conjugate-symmetric input."""
    c = np.asarray(c, dtype=complex)
    if c.ndim != 1 or c.size % 2 == 0:
        raise ValueError(f"coefficient vector must be 1-d with odd length, got shape {c.shape}")
    f = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(c))) * c.size
    if np.allclose(c, np.conj(c[::-1]), rtol=0, atol=1e-14 * max(1.0, np.abs(c).max())):
        return f.real
    return f


def cesaro_weights(N: int) -> np.ndarray:
    """Weights ``1 - |k|/(N+1)`` for ``k = -N..N``."""
    k = np.arange(-N, N + 1)
    return 1.0 - np.abs(k) / (N + 1)


def _series(c_pos, c0, x, t, derivs):
    """Evaluate ``c0 + 2 Re sum_k c_pos[k] e^{-k^2 t/2} (ik)^d e^{ikx}`` for each ``d`` in ``derivs``.

    ``c_pos`` already carries the Cesaro weights; ``x`` and ``t`` are broadcast.
    """
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    shape = x.shape
    x = x.ravel()
    t = t.ravel()
    N = c_pos.size
    k = np.arange(1, N + 1, dtype=float)
    out = [np.empty(x.size) for _ in derivs]
    step = max(1, _CHUNK // max(N, 1))
    for lo in range(0, x.size, step):
        xs, ts = x[lo:lo + step], t[lo:lo + step]
        terms = np.exp(np.multiply.outer(-0.5 * ts, k * k) + 1j * np.multiply.outer(xs, k)) * c_pos
        for j, d in enumerate(derivs):
            if d == 0:
                out[j][lo:lo + step] = c0 + 2.0 * terms.real.sum(axis=1)
            else:
                out[j][lo:lo + step] = 2.0 * (terms @ ((1j * k) ** d)).real
    return [o.reshape(shape) for o in out]


@dataclass(frozen=True, eq=False)
class SpectralPrior:
    """Fitted (or given) node values ``f`` of an order-``N`` Cesaro density.

    ``f`` is the single source of truth; Fourier coefficients are derived
    lazily.  Instances are immutable.
    """

    N: int
    f: np.ndarray
    domain: DomainSpec | None = None

    def __post_init__(self):
        f = np.array(self.f, dtype=float)
        if f.shape != (2 * self.N + 1,):
            raise ValueError(f"expected {2 * self.N + 1} node values for N={self.N}, got shape {f.shape}")
        if self.N < 1:
            raise ValueError("order N must be >= 1")
        if not np.all(np.isfinite(f)) or f.min() < -1e-12 * max(1.0, f.max()):
            raise ValueError("node values must be finite and non-negative")
        total = kappa(self.N) * f.sum()
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"kappa_N * sum(f) must equal 1, got {total!r}")
        f = np.maximum(f, 0.0)
        f.flags.writeable = False
        object.__setattr__(self, "f", f)

    @classmethod
    def uniform(cls, N: int, domain: DomainSpec | None = None) -> "SpectralPrior":
        return cls(N, np.full(2 * N + 1, 1.0 / TWO_PI), domain)

    @classmethod
    def from_weights(cls, weights, domain: DomainSpec | None = None) -> "SpectralPrior":
        """Build from simplex weights ``kappa_N f``."""
        weights = np.asarray(weights, dtype=float)
        N = (weights.size - 1) // 2
        return cls(N, weights / kappa(N), domain)

    @property
    def weights(self) -> np.ndarray:
        """Mixture weights ``kappa_N f`` of the shifted Fejer kernels."""
        return kappa(self.N) * self.f

    @cached_property
    def coefficients(self) -> np.ndarray:
        """Complex ``c_k``, ``k = -N..N``."""
        return dft_nodes_to_coeffs(self.f)

    @cached_property
    def _cesaro_pos(self) -> np.ndarray:
        N = self.N
        return (self.coefficients * cesaro_weights(N))[N + 1:]

    def cesaro_coefficients(self, t: float = 0.0) -> np.ndarray:
        """Coefficients of ``C_N(.; t)``: ``(1 - |k|/(N+1)) c_k exp(-k^2 t / 2)``."""
        if t < 0:
            raise ValueError("t must be non-negative")
        k = np.arange(-self.N, self.N + 1)
        return cesaro_weights(self.N) * self.coefficients * np.exp(-0.5 * k * k * t)

    def to_json(self) -> str:
        if self.domain is None:
            raise ValueError("serialization needs a domain")
        return json.dumps(
            {
                "N": self.N,
                "L": self.domain.L,
                "x0": self.domain.x0,
                "t_max": self.domain.t_max,
                "f": [float(v) for v in self.f],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SpectralPrior":
        obj = json.loads(text)
        missing = {"N", "L", "x0", "t_max", "f"} - set(obj)
        if missing:
            raise ValueError(f"spectral model JSON lacks fields: {sorted(missing)}")
        domain = DomainSpec(x0=float(obj["x0"]), L=float(obj["L"]), t_max=float(obj["t_max"]))
        return cls(int(obj["N"]), np.asarray(obj["f"], dtype=float), domain)


def eval_density(prior: SpectralPrior, x, t=0.0):
    """``C_N(x; t)`` on the torus; ``x`` and ``t`` broadcast."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    c0 = prior.coefficients[prior.N].real
    (value,) = _series(prior._cesaro_pos, c0, x, t, (0,))
    return value[()]


def eval_density_derivs(prior: SpectralPrior, x, t=0.0, order: int = 2):
    """``(C, dC/dx, ..., d^order C / dx^order)`` at ``(x, t)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    c0 = prior.coefficients[prior.N].real
    return tuple(v[()] for v in _series(prior._cesaro_pos, c0, x, t, tuple(range(order + 1))))


def eval_log_derivs(prior: SpectralPrior, x, t=0.0):
    """``(log C, l', l'')`` with ``l = log C_N(.; t)``; derivatives are analytic."""
    C, C1, C2 = (np.asarray(v) for v in eval_density_derivs(prior, x, t, order=2))
    if np.any(C <= 0):
        raise ValueError("vanishing density: log-derivatives are undefined")
    score = C1 / C
    return np.log(C)[()], score[()], (C2 / C - score**2)[()]


def heat_basis(x, t, N: int, deriv: int = 0) -> np.ndarray:
    """Matrix ``B`` with ``(B @ f)_i = d^deriv/dx^deriv C_{N,f}(x_i; t_i)``, shape ``(n, 2N+1)``.

    Row ``i`` holds the heat-evolved Fejer kernels centered at every node,
    divided by ``2N+1``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
    k = np.arange(1, N + 1, dtype=float)
    damp = (1.0 - k / (N + 1)) * np.exp(np.multiply.outer(-0.5 * t, k * k))
    kx = np.multiply.outer(x, k)
    cx, sx = damp * np.cos(kx), damp * np.sin(kx)
    kn = np.multiply.outer(k, nodes(N))
    cn, sn = np.cos(kn), np.sin(kn)
    if deriv == 0:
        B = 1.0 + 2.0 * (cx @ cn + sx @ sn)
    elif deriv == 1:
        B = 2.0 * ((k * cx) @ sn - (k * sx) @ cn)
    elif deriv == 2:
        B = -2.0 * ((k * k * cx) @ cn + (k * k * sx) @ sn)
    else:
        raise ValueError("deriv must be 0, 1 or 2")
    return B / (2 * N + 1)


def sample_torus(prior: SpectralPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws from ``C_N(.; 0)`` on ``[-pi, pi)``.

    Picks a node by its weight, then draws a Fejer-distributed offset by
    rejection against the uniform density (acceptance ``1/(N+1)``).
    """
    N = prior.N
    w = prior.weights
    centers = nodes(N)[rng.choice(w.size, size=n, p=w / w.sum())]
    offsets = np.empty(n)
    filled = 0
    while filled < n:
        # batch sized for the expected acceptance rate, capped to bound memory
        m = min(max(64, int(1.2 * (n - filled) * (N + 1))), 1 << 22)
        u = rng.uniform(-math.pi, math.pi, size=m)
        keep = u[rng.uniform(0.0, N + 1, size=m) < fejer_kernel(u, N)]
        take = min(keep.size, n - filled)
        offsets[filled:filled + take] = keep[:take]
        filled += take
    return wrap(centers + offsets)


def wrap(x):
    """Map onto ``[-pi, pi)``."""
    return (np.asarray(x, dtype=float) + math.pi) % TWO_PI - math.pi
