"""Spectral empirical Bayes: nonparametric priors for noisy experiment effects."""

from .core import DomainSpec, ExperimentRecord, make_domain, project_to_boundary, rescale, unrescale
from .gmm import GmmPrior, em_fit, gmm_marginal_ll, gmm_posterior
from .mle import FitConfig, FitReport, fit, fit_records, project_simplex
from .modelsel import CvResult, monte_carlo_cv, predicted_log_likelihood, score_matching_loss
from .posterior import (
    PosteriorSummary,
    calibration_check,
    decide_launch,
    posterior_density,
    posterior_moments,
    tweedie_mean,
    tweedie_variance,
)
from .sim import NoiseLaw, PriorSpec, aliasing_bound, oracle_marginal, sample_experiments
from .spectral import SpectralPrior, eval_density, eval_density_derivs, heat_basis

__version__ = "0.1.0"
