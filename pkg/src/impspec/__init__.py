"""Bayesian causal effect estimation with two-stage Gaussian process posteriors.

The effect of an intervention is written as the integral of an outcome
regression against a conditional distribution of mediators or covariates.
Both regressions get GP priors; the posterior of the integral has closed-form
moments that stay well-behaved away from the data, with an integrating
measure chosen by bootstrap calibration.
"""

__version__ = "0.1.0"

from .gp import FittedModel, ModelParams, NumericalError, TwoStageData, fit_model
from .kernels import KernelParams, SpectralMeasure
from .posterior import CausalQuery, PosteriorMoments, posterior_batch, posterior_moments

__all__ = [
    "__version__",
    "KernelParams",
    "SpectralMeasure",
    "TwoStageData",
    "ModelParams",
    "FittedModel",
    "NumericalError",
    "fit_model",
    "CausalQuery",
    "PosteriorMoments",
    "posterior_moments",
    "posterior_batch",
]
