"""The censored-GEV tube-maximum model.

A tube holds a Poisson(lambda_u) number of deep pits whose depths exceed a
threshold u with GPD(sigma_tilde_u, xi) exceedances; the tube maximum is then
a GEV left-censored at u, with an atom of mass exp(-lambda_u) at u for tubes
with no deep pits.  This module provides the parameter bundles, the exact
mappings between the generative and censored-GEV parameterizations, the
censored likelihood, the priors and the log posterior used by the sampler.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import dists
from .dists import GevParams, GpdParams, XI_ZERO_TOL

MODEL_CENSORED = "censored"
MODEL_STANDARD = "standard"
MODEL_KINDS = (MODEL_CENSORED, MODEL_STANDARD)


@dataclass(frozen=True)
class BmotParams:
    """Generative parameterization: exceedance rate, GPD scale, shape, threshold."""

    lambda_u: float
    sigma_tilde_u: float
    xi: float
    u: float

    def __post_init__(self) -> None:
        if not (self.lambda_u > 0.0 and np.isfinite(self.lambda_u)):
            raise ValueError(f"lambda_u must be positive, got {self.lambda_u}")
        if not (self.sigma_tilde_u > 0.0 and np.isfinite(self.sigma_tilde_u)):
            raise ValueError(f"sigma_tilde_u must be positive, got {self.sigma_tilde_u}")
        if not (np.isfinite(self.xi) and np.isfinite(self.u)):
            raise ValueError("xi and u must be finite")


@dataclass(frozen=True)
class CensoredGevParams:
    """GEV parameters together with the left-censoring point u.

    The generative model constrains the parameter space: sigma > xi * (mu - u)
    must hold, and is checked on construction.
    """

    gev: GevParams
    u: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.u):
            raise ValueError("censoring point u must be finite")
        slack = self.gev.sigma - self.gev.xi * (self.gev.mu - self.u)
        if not slack > 0.0:
            raise ValueError(
                "invalid censored-GEV parameters: the constraint "
                f"sigma > xi*(mu - u) fails (sigma - xi*(mu - u) = {slack})"
            )


def _censored_trusted(gev: GevParams, u: float) -> CensoredGevParams:
    # construction path where the parameter constraint holds analytically;
    # recomputing sigma - xi*(mu - u) in floats can cancel to <= 0 spuriously
    obj = object.__new__(CensoredGevParams)
    object.__setattr__(obj, "gev", gev)
    object.__setattr__(obj, "u", u)
    return obj


def gev_from_bmot(p: BmotParams) -> CensoredGevParams:
    """Map the generative parameters to the censored-GEV form.

    mu = u + sigma_tilde * (lambda^xi - 1) / xi and sigma = sigma_tilde *
    lambda^xi, with the log limit mu = u + sigma_tilde*log(lambda) at xi -> 0.
    The output satisfies the parameter constraint by construction.
    """
    log_lam = np.log(p.lambda_u)
    if abs(p.xi) < XI_ZERO_TOL:
        mu = p.u + p.sigma_tilde_u * log_lam
        sigma = p.sigma_tilde_u
    else:
        mu = p.u + p.sigma_tilde_u * np.expm1(p.xi * log_lam) / p.xi
        sigma = p.sigma_tilde_u * np.exp(p.xi * log_lam)
    return _censored_trusted(GevParams(mu=mu, sigma=sigma, xi=p.xi), p.u)


def bmot_from_gev(p: CensoredGevParams) -> BmotParams:
    """Recover (lambda_u, sigma_tilde_u) from the censored-GEV parameters.

    sigma_tilde = sigma - xi*(mu - u) and lambda = (sigma / sigma_tilde)^(1/xi);
    exact inverse of ``gev_from_bmot`` up to floating-point rounding.
    """
    g = p.gev
    ratio = g.xi * (g.mu - p.u) / g.sigma
    sigma_tilde = g.sigma * (1.0 - ratio)
    if not sigma_tilde > 0.0:
        raise ValueError(
            "invalid censored-GEV parameters: the constraint "
            f"sigma > xi*(mu - u) fails (sigma - xi*(mu - u) = {sigma_tilde})"
        )
    if abs(g.xi) < XI_ZERO_TOL:
        log_lam = (g.mu - p.u) / g.sigma
    else:
        log_lam = -np.log1p(-ratio) / g.xi
    return BmotParams(
        lambda_u=np.exp(log_lam), sigma_tilde_u=sigma_tilde, xi=g.xi, u=p.u
    )


def censored_gev_cdf(x, p: CensoredGevParams):
    """Distribution function of the tube maximum, defined on [u, inf).

    At x = u this returns the atom mass exp(-lambda_u); the model leaves the
    distribution below u unspecified, so x < u is rejected.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < p.u):
        raise ValueError("censored_gev_cdf is defined for x >= u only")
    b = bmot_from_gev(p)
    s = dists.gpd_survival(x, GpdParams(b.sigma_tilde_u, b.xi, b.u))
    out = np.exp(-b.lambda_u * np.asarray(s))
    return out if out.ndim else float(out)


def bundle_max_params(p: BmotParams, n_tubes: int) -> CensoredGevParams:
    """Distribution of the maximum over n_tubes independent tube maxima.

    By max-stability this is the censored GEV with lambda_u replaced by
    n_tubes * lambda_u (atom mass exp(-n*lambda_u) at u).
    """
    if n_tubes < 1:
        raise ValueError(f"n_tubes must be a positive integer, got {n_tubes}")
    return gev_from_bmot(replace(p, lambda_u=n_tubes * p.lambda_u))


def sample_tube_maximum(p: BmotParams, rng: np.random.Generator, size: int | None = None):
    """Draw tube maxima from the generative mechanism.

    K ~ Poisson(lambda_u) deep pits; the tube maximum is u when K = 0 and the
    largest of K GPD draws above u otherwise.
    """
    gpd = GpdParams(p.sigma_tilde_u, p.xi, p.u)
    if size is None:
        k = dists.poisson_sample(p.lambda_u, rng)
        if k == 0:
            return p.u
        return float(np.max(dists.gpd_sample(gpd, rng, size=k)))
    counts = dists.poisson_sample(p.lambda_u, rng, size=size)
    total = int(counts.sum())
    out = np.full(size, p.u, dtype=float)
    if total == 0:
        return out
    exceedances = dists.gpd_sample(gpd, rng, size=total)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    nonzero = counts > 0
    out[nonzero] = np.maximum.reduceat(exceedances, starts[nonzero])
    return out


class DatasetError(ValueError):
    """Raised when observations are inconsistent with the analysis threshold."""


@dataclass(frozen=True)
class Dataset:
    """Tube-maximum wall-loss observations with rounding half-widths.

    ``half_widths[i] == 0`` marks an exact observation; otherwise the recorded
    value stands for a true value in [value - hw, value + hw].  No interval
    may straddle the threshold u.
    """

    values: np.ndarray
    half_widths: np.ndarray
    u: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        half_widths = np.asarray(self.half_widths, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "half_widths", half_widths)
        if values.ndim != 1 or half_widths.shape != values.shape:
            raise DatasetError("values and half_widths must be 1-d arrays of equal length")
        if not np.all(np.isfinite(values)):
            raise DatasetError("observations must be finite")
        if not np.all(np.isfinite(half_widths)) or np.any(half_widths < 0.0):
            raise DatasetError("rounding half-widths must be finite and non-negative")
        # thresholds are meant to sit on rounding-interval boundaries; allow
        # machine-precision slack so ulp noise in value +/- hw cannot reject
        # a boundary-placed threshold
        tol = 1e-12 * max(1.0, abs(self.u)) if np.isfinite(self.u) else 0.0
        straddling = np.flatnonzero(
            (values - half_widths < self.u - tol) & (values + half_widths > self.u + tol)
        )
        if straddling.size:
            i = int(straddling[0])
            raise DatasetError(
                f"observation {i} (value {values[i]} +/- {half_widths[i]}) straddles "
                f"the threshold u={self.u}; place the threshold on a rounding-interval "
                "boundary"
            )
        values.flags.writeable = False
        half_widths.flags.writeable = False
        if self.n_plus == 0:
            warnings.warn(
                "no observations exceed the threshold: the exceedance parameters "
                "revert to their priors",
                stacklevel=2,
            )
        elif np.isfinite(self.u) and self.n_minus == 0:
            warnings.warn(
                "the threshold lies below every observation: the censoring atom "
                "carries no data and the fit degenerates to a standard GEV",
                stacklevel=2,
            )

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def exceedance_mask(self) -> np.ndarray:
        return self.values > self.u

    @property
    def n_plus(self) -> int:
        return int(np.count_nonzero(self.exceedance_mask))

    @property
    def n_minus(self) -> int:
        return self.n - self.n_plus

    def imputable_indices(self, model_kind: str) -> np.ndarray:
        """Indices of interval-censored observations the given model imputes.

        The censored model imputes rounded exceedances only (values at or
        below u contribute the fixed atom factor); the standard model imputes
        every rounded observation.
        """
        rounded = self.half_widths > 0.0
        if model_kind == MODEL_CENSORED:
            return np.flatnonzero(rounded & self.exceedance_mask)
        if model_kind == MODEL_STANDARD:
            return np.flatnonzero(rounded)
        raise ValueError(f"unknown model kind: {model_kind!r}")


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the independent priors.

    ``psi`` is the standard deviation of the Normal prior on logit(xi + 0.5),
    which restricts xi to (-0.5, 0.5).  Gamma(shape, rate) priors apply to the
    GEV scale sigma and the exceedance rate lambda_u; the Normal location
    prior applies to the standard (uncensored) GEV model only.
    """

    psi: float = 1.4
    alpha_sigma: float = 0.04
    beta_sigma: float = 0.4
    alpha_lambda: float = 0.7225
    beta_lambda: float = 0.85
    mu_prior_mean: float = 0.1
    mu_prior_sd: float = 2.0

    def __post_init__(self) -> None:
        for name in ("psi", "alpha_sigma", "beta_sigma", "alpha_lambda", "beta_lambda", "mu_prior_sd"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                raise ValueError(f"prior hyperparameter {name} must be positive, got {value}")
        if not np.isfinite(self.mu_prior_mean):
            raise ValueError("mu_prior_mean must be finite")


def _effective_values(data: Dataset, model_kind: str, imputed) -> np.ndarray:
    """Observation vector with imputed values substituted for rounded entries."""
    values = data.values.copy()
    idx = data.imputable_indices(model_kind)
    if imputed is not None:
        imputed = np.asarray(imputed, dtype=float)
        if imputed.shape != (idx.size,):
            raise ValueError(
                f"imputed values must have length {idx.size} "
                f"(one per interval-censored observation), got shape {imputed.shape}"
            )
        values[idx] = imputed
    if model_kind == MODEL_CENSORED:
        return values[data.exceedance_mask]
    return values


def log_likelihood_censored(data: Dataset, p: BmotParams, imputed=None) -> float:
    """Censored log likelihood: n_minus draws of the atom plus GEV densities.

    Returns -inf (soft rejection) when any exceedance falls outside the GEV
    support implied by the parameters.
    """
    if data.u != p.u:
        raise ValueError(
            f"dataset threshold {data.u} does not match parameter threshold {p.u}"
        )
    gev = gev_from_bmot(p).gev
    exceedances = _effective_values(data, MODEL_CENSORED, imputed)
    out = -data.n_minus * p.lambda_u
    if exceedances.size:
        out += float(np.sum(dists.gev_log_density(exceedances, gev)))
    return out


def log_likelihood_standard_gev(values, p: GevParams) -> float:
    """Plain GEV log likelihood over all values; -inf outside the support."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot evaluate the likelihood of an empty sample")
    return float(np.sum(dists.gev_log_density(values, p)))


def _log_prior_xi(xi: float, psi: float) -> float:
    # logit(xi + 0.5) ~ Normal(0, psi); includes the change-of-variables term
    if not -0.5 < xi < 0.5:
        return -np.inf
    p = xi + 0.5
    w = np.log(p) - np.log1p(-p)
    return dists.normal_log_density(w, 0.0, psi) - np.log(p) - np.log1p(-p)


def log_prior(p: BmotParams | GevParams, cfg: PriorConfig) -> float:
    """Joint log prior density.

    For the censored model the Gamma scale prior applies to the GEV scale
    sigma = sigma_tilde_u * lambda_u^xi (the sampled coordinate), not to the
    GPD scale.  For the standard model the Normal location prior is added.
    """
    if isinstance(p, BmotParams):
        sigma = p.sigma_tilde_u * np.exp(p.xi * np.log(p.lambda_u))
        return (
            float(dists.gamma_log_density(p.lambda_u, cfg.alpha_lambda, cfg.beta_lambda))
            + float(dists.gamma_log_density(sigma, cfg.alpha_sigma, cfg.beta_sigma))
            + _log_prior_xi(p.xi, cfg.psi)
        )
    if isinstance(p, GevParams):
        return (
            float(dists.normal_log_density(p.mu, cfg.mu_prior_mean, cfg.mu_prior_sd))
            + float(dists.gamma_log_density(p.sigma, cfg.alpha_sigma, cfg.beta_sigma))
            + _log_prior_xi(p.xi, cfg.psi)
        )
    raise TypeError(f"unsupported parameter bundle: {type(p).__name__}")


def log_posterior(data: Dataset, p: BmotParams | GevParams, cfg: PriorConfig, imputed=None) -> float:
    """Log prior plus the matching log likelihood; -inf propagates."""
    lp = log_prior(p, cfg)
    if not np.isfinite(lp):
        return -np.inf
    if isinstance(p, BmotParams):
        return lp + log_likelihood_censored(data, p, imputed)
    values = _effective_values(data, MODEL_STANDARD, imputed)
    if values.size == 0:
        return lp
    return lp + log_likelihood_standard_gev(values, p)
