"""Bayesian left-censored GEV modelling of tube-maximum pit depths."""

from .dists import GevParams, GpdParams
from .model import (
    BmotParams,
    CensoredGevParams,
    Dataset,
    PriorConfig,
    bmot_from_gev,
    bundle_max_params,
    censored_gev_cdf,
    gev_from_bmot,
    sample_tube_maximum,
)
from .sampler import PosteriorSamples, SamplerConfig, gelman_rubin, hdi, run_chains

__version__ = "0.1.0"

__all__ = [
    "BmotParams",
    "CensoredGevParams",
    "Dataset",
    "GevParams",
    "GpdParams",
    "PosteriorSamples",
    "PriorConfig",
    "SamplerConfig",
    "bmot_from_gev",
    "bundle_max_params",
    "censored_gev_cdf",
    "gelman_rubin",
    "gev_from_bmot",
    "hdi",
    "run_chains",
    "sample_tube_maximum",
    "__version__",
]
