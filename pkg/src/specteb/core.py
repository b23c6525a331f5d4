"""Experiment records, the analysis domain, and rescaling onto the torus.

Raw effects live on ``[x0 - L, x0 + L]``.  All spectral computations happen on
the torus ``[-pi, pi]`` after the affine map ``x = (delta_hat - x0) * pi / L``;
noise scales map the same way, and variances become ``t = (s * pi / L) ** 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# relative slack for points that sit on the boundary up to rounding
_EDGE = 8 * np.finfo(float).eps


@dataclass(frozen=True)
class ExperimentRecord:
    """One observed effect ``delta_hat`` with known noise scale ``s`` (raw units)."""

    delta_hat: float
    s: float

    def __post_init__(self):
        if not (math.isfinite(self.delta_hat) and math.isfinite(self.s)):
            raise ValueError(f"non-finite record: delta_hat={self.delta_hat!r}, s={self.s!r}")
        if self.s < 0:
            raise ValueError(f"noise scale must be non-negative, got s={self.s!r}")


@dataclass(frozen=True)
class DomainSpec:
    """Center ``x0``, half-length ``L`` and largest torus-scale variance ``t_max``."""

    x0: float
    L: float
    t_max: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x0) and math.isfinite(self.L) and self.L > 0):
            raise ValueError(f"invalid domain: x0={self.x0!r}, L={self.L!r}")
        if not self.t_max >= 0:
            raise ValueError(f"t_max must be non-negative, got {self.t_max!r}")

    @property
    def scale(self) -> float:
        """Torus units per raw unit, ``pi / L``."""
        return math.pi / self.L

    @property
    def bounds(self) -> tuple[float, float]:
        return self.x0 - self.L, self.x0 + self.L


def as_arrays(records: Iterable[ExperimentRecord] | tuple) -> tuple[np.ndarray, np.ndarray]:
    """Split records (or an already split ``(delta_hat, s)`` pair) into float arrays."""
    if isinstance(records, tuple) and len(records) == 2 and not isinstance(records[0], ExperimentRecord):
        delta_hat, s = (np.asarray(a, dtype=float) for a in records)
    else:
        records = list(records)
        delta_hat = np.array([r.delta_hat for r in records], dtype=float)
        s = np.array([r.s for r in records], dtype=float)
    if delta_hat.shape != s.shape or delta_hat.ndim != 1:
        raise ValueError("delta_hat and s must be 1-d arrays of equal length")
    return delta_hat, s


def _check_finite(delta_hat: np.ndarray, s: np.ndarray) -> None:
    bad = ~(np.isfinite(delta_hat) & np.isfinite(s))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"record {i} is not finite: delta_hat={delta_hat[i]!r}, s={s[i]!r}")
    neg = s < 0
    if neg.any():
        i = int(np.flatnonzero(neg)[0])
        raise ValueError(f"record {i} has negative noise scale s={s[i]!r}")


def default_half_length(records, x0: float | None = None, factor: float = 1.1) -> float:
    """Half-length ``factor * max|delta_hat - x0|``; with it no record needs projection."""
    delta_hat, s = as_arrays(records)
    if delta_hat.size == 0:
        raise ValueError("no records")
    _check_finite(delta_hat, s)
    if x0 is None:
        x0 = float(np.median(delta_hat))
    spread = float(np.max(np.abs(delta_hat - x0)))
    return factor * spread if spread > 0 else 1.0


def make_domain(records, L: float, x0: float | None = None) -> DomainSpec:
    """Build the domain: ``x0`` is the median unless given, ``t_max = max (s pi / L)^2``."""
    delta_hat, s = as_arrays(records)
    if delta_hat.size == 0:
        raise ValueError("cannot build a domain from an empty dataset")
    _check_finite(delta_hat, s)
    if not (math.isfinite(L) and L > 0):
        raise ValueError(f"half-length L must be positive, got {L!r}")
    if x0 is None:
        # numpy's median averages the two middle values for even counts
        x0 = float(np.median(delta_hat))
    # projection only shrinks s, so this also bounds projected records
    t_max = float(np.max((s * math.pi / L) ** 2))
    return DomainSpec(x0=x0, L=float(L), t_max=t_max)


def _project_arrays(delta_hat, s, x0, L):
    centered = delta_hat - x0
    out = np.abs(centered) > L * (1 + _EDGE)
    if not out.any():
        return delta_hat, s
    delta_hat = delta_hat.copy()
    s = s.copy()
    ratio = L / np.abs(centered[out])
    delta_hat[out] = x0 + np.sign(centered[out]) * L
    s[out] = s[out] * ratio
    return delta_hat, s


def project_to_boundary(record: ExperimentRecord, domain: DomainSpec) -> ExperimentRecord:
    """Move an out-of-domain record onto the nearest boundary, shrinking ``s`` proportionally.

    The transform ``(d, s) -> (sign(d) L, L s / |d|)`` in centered coordinates keeps
    the z-score ``d / s`` fixed.  In-domain records come back unchanged.
    """
    centered = record.delta_hat - domain.x0
    if abs(centered) <= domain.L * (1 + _EDGE):
        return record
    return ExperimentRecord(
        delta_hat=domain.x0 + math.copysign(domain.L, centered),
        s=record.s * domain.L / abs(centered),
    )


def project_arrays(delta_hat, s, domain: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project_to_boundary`."""
    delta_hat = np.asarray(delta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    return _project_arrays(delta_hat, s, domain.x0, domain.L)


def rescale(record: ExperimentRecord, domain: DomainSpec, project: bool = False) -> tuple[float, float]:
    """Map one record to torus coordinates ``(x, t)``."""
    if project:
        record = project_to_boundary(record, domain)
    centered = record.delta_hat - domain.x0
    if abs(centered) > domain.L * (1 + _EDGE):
        raise ValueError(
            f"delta_hat={record.delta_hat!r} lies outside [{domain.x0 - domain.L}, {domain.x0 + domain.L}]"
        )
    return min(max(centered * domain.scale, -math.pi), math.pi), (record.s * domain.scale) ** 2


def rescale_arrays(delta_hat, s, domain: DomainSpec, project: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`rescale`; returns ``(x, t)`` arrays."""
    delta_hat = np.asarray(delta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    _check_finite(delta_hat, s)
    if project:
        delta_hat, s = _project_arrays(delta_hat, s, domain.x0, domain.L)
    centered = delta_hat - domain.x0
    out = np.abs(centered) > domain.L * (1 + _EDGE)
    if out.any():
        i = int(np.flatnonzero(out)[0])
        raise ValueError(
            f"record {i} (delta_hat={delta_hat[i]!r}) lies outside the domain; "
            "enable projection or enlarge L"
        )
    return np.clip(centered * domain.scale, -math.pi, math.pi), (s * domain.scale) ** 2


def unrescale(x: float, t: float, domain: DomainSpec) -> ExperimentRecord:
    """Inverse of :func:`rescale` (without projection)."""
    return ExperimentRecord(delta_hat=domain.x0 + x / domain.scale, s=math.sqrt(t) / domain.scale)


def records_from_arrays(delta_hat: Sequence[float], s: Sequence[float]) -> list[ExperimentRecord]:
    return [ExperimentRecord(float(d), float(v)) for d, v in zip(delta_hat, s)]
