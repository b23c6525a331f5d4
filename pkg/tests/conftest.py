import numpy as np
import pytest

from specteb.core import DomainSpec
from specteb.spectral import SpectralPrior, kappa


def random_simplex_prior(N, rng, domain=None, floor=0.0):
    """Random node values on the scaled simplex; ``floor`` keeps every node positive."""
    w = rng.dirichlet(np.full(2 * N + 1, 0.5)) + floor
    w /= w.sum()
    return SpectralPrior(N, w / kappa(N), domain)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def domain8():
    return DomainSpec(x0=0.0, L=8.0, t_max=(np.pi / 8) ** 2)
