"""Posterior sampling engine.

Multi-chain adaptive random-walk Metropolis over an unconstrained
reparameterization of the model parameters, with a systematic-scan Gibbs
step that redraws each interval-censored observation from the fitted GEV
truncated to its rounding interval.  Proposal adaptation (scalar step size
toward a target acceptance rate plus the empirical covariance of warmup
draws) is confined to warmup; the kernel is frozen afterwards so the
post-warmup chain leaves the posterior invariant.

Chains are independent: each derives its own RNG stream by splitting the
configured seed, so results are reproducible regardless of scheduling.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import dists
from .dists import GevParams
from .model import (
    MODEL_CENSORED,
    MODEL_KINDS,
    MODEL_STANDARD,
    BmotParams,
    Dataset,
    PriorConfig,
    gev_from_bmot,
    log_posterior,
)

PARAM_NAMES = {
    MODEL_CENSORED: ("lambda_u", "sigma", "xi"),
    MODEL_STANDARD: ("mu", "sigma", "xi"),
}


@dataclass(frozen=True)
class SamplerConfig:
    """Chain count, budget, seed and tuning targets for one posterior run."""

    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 2000
    seed: int = 0
    target_accept: float = 0.3
    rhat_threshold: float = 1.05

    def __post_init__(self) -> None:
        if self.n_chains < 2:
            raise ValueError("need at least 2 chains for the convergence diagnostic")
        if self.n_draws < 100:
            raise ValueError("need at least 100 post-warmup draws per chain")
        if self.n_warmup < 1:
            raise ValueError("need at least 1 warmup iteration")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass(frozen=True)
class PosteriorSamples:
    """Post-warmup draws on the natural scale, merged across chains."""

    draws: np.ndarray  # (n_chains, n_draws, n_params)
    param_names: tuple[str, ...]
    model_kind: str
    u: float
    seed: int
    accept_rate: np.ndarray  # (n_chains,)
    rhat: np.ndarray  # (n_params,)
    rhat_threshold: float
    imputed: np.ndarray | None = None  # (n_chains, n_draws, n_imputable)
    imputable_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __post_init__(self) -> None:
        self.draws.flags.writeable = False
        if self.imputed is not None:
            self.imputed.flags.writeable = False

    @property
    def converged(self) -> bool:
        return bool(np.all(self.rhat <= self.rhat_threshold))

    def flat(self) -> np.ndarray:
        """Draws pooled over chains, shape (n_chains * n_draws, n_params)."""
        return self.draws.reshape(-1, self.draws.shape[-1])

    def column(self, name: str) -> np.ndarray:
        return self.flat()[:, self.param_names.index(name)]


def to_unconstrained(theta, model_kind: str) -> np.ndarray:
    """Map natural parameters to the unconstrained sampling space.

    log for positive coordinates (lambda_u, sigma), identity for mu and
    logit(xi + 0.5) for the shape.
    """
    theta = np.asarray(theta, dtype=float)
    lam_or_mu, sigma, xi = theta
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if not -0.5 < xi < 0.5:
        raise ValueError("xi must lie in (-0.5, 0.5)")
    p = xi + 0.5
    w = np.log(p) - np.log1p(-p)
    if model_kind == MODEL_CENSORED:
        if lam_or_mu <= 0.0:
            raise ValueError("lambda_u must be positive")
        first = np.log(lam_or_mu)
    elif model_kind == MODEL_STANDARD:
        first = lam_or_mu
    else:
        raise ValueError(f"unknown model kind: {model_kind!r}")
    return np.array([first, np.log(sigma), w])


def from_unconstrained(v, model_kind: str) -> np.ndarray:
    """Inverse of ``to_unconstrained``."""
    v = np.asarray(v, dtype=float)
    xi = special.expit(v[2]) - 0.5
    first = np.exp(v[0]) if model_kind == MODEL_CENSORED else v[0]
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {model_kind!r}")
    return np.array([first, np.exp(v[1]), xi])


def unconstrained_log_jacobian(v, model_kind: str) -> float:
    """log |d theta / d v|, added to the posterior in unconstrained space."""
    v = np.asarray(v, dtype=float)
    # d xi / d w = p (1 - p) with p = expit(w); in log form via softplus
    out = -np.logaddexp(0.0, -v[2]) - np.logaddexp(0.0, v[2]) + v[1]
    if model_kind == MODEL_CENSORED:
        out += v[0]
    return float(out)


def _params_from_theta(theta, model_kind: str, u: float):
    lam_or_mu, sigma, xi = theta
    if model_kind == MODEL_STANDARD:
        return GevParams(mu=lam_or_mu, sigma=sigma, xi=xi)
    # sigma is the GEV scale; the GPD scale derives as sigma * lambda^(-xi),
    # positive for all positive (lambda, sigma), so no constraint check needed
    sigma_tilde = sigma * np.exp(-xi * np.log(lam_or_mu))
    return BmotParams(lambda_u=lam_or_mu, sigma_tilde_u=sigma_tilde, xi=xi, u=u)


def _draw_initial_theta(cfg: PriorConfig, model_kind: str, rng: np.random.Generator) -> np.ndarray:
    if model_kind == MODEL_CENSORED:
        first = dists.gamma_sample(cfg.alpha_lambda, cfg.beta_lambda, rng)
    else:
        first = cfg.mu_prior_mean + cfg.mu_prior_sd * rng.standard_normal()
    sigma = dists.gamma_sample(cfg.alpha_sigma, cfg.beta_sigma, rng)
    xi = float(special.expit(cfg.psi * rng.standard_normal()) - 0.5)
    return np.array([first, sigma, xi])


def _impute_intervals(lo, hi, gev: GevParams, current, rng: np.random.Generator) -> np.ndarray:
    """One sweep of truncated-GEV draws, one per rounding interval.

    Intervals whose probability mass underflows keep their current values
    (the conditional draw is numerically undefined there).
    """
    g_lo = np.asarray(dists.gev_cdf(lo, gev))
    g_hi = np.asarray(dists.gev_cdf(hi, gev))
    mass = g_hi - g_lo
    ok = mass > 0.0
    u = rng.random(lo.size)
    out = np.array(current, dtype=float)
    if np.any(ok):
        q = np.clip(g_lo[ok] + u[ok] * mass[ok], dists._UNIT_LO, dists._UNIT_HI)
        out[ok] = np.clip(dists.gev_quantile(q, gev), lo[ok], hi[ok])
    return out


def _run_single_chain(
    data: Dataset,
    model_kind: str,
    priors: PriorConfig,
    cfg: SamplerConfig,
    seed_seq: np.random.SeedSequence,
    impute: bool,
):
    rng = np.random.default_rng(seed_seq)
    idx = data.imputable_indices(model_kind) if impute else np.empty(0, dtype=int)
    lo = data.values[idx] - data.half_widths[idx]
    hi = data.values[idx] + data.half_widths[idx]
    imputed = data.values[idx].copy()

    def log_target(v, imputed_values):
        # extreme excursions can overflow/underflow the natural-scale
        # parameters; those carry zero posterior mass, so reject softly
        try:
            with np.errstate(over="ignore"):
                theta = from_unconstrained(v, model_kind)
                params = _params_from_theta(theta, model_kind, data.u)
                lp = log_posterior(data, params, priors, imputed_values if idx.size else None)
        except ValueError:
            return -np.inf
        if not np.isfinite(lp):
            return -np.inf
        return lp + unconstrained_log_jacobian(v, model_kind)

    # overdispersed start: independent prior draws per chain (up to 100),
    # keeping the draw with the highest finite posterior.  Heavy-tailed scale
    # priors put single draws hundreds of log-units from the posterior mass,
    # which a random walk cannot traverse in any reasonable warmup.
    v = None
    current_lp = -np.inf
    for _ in range(100):
        theta0 = _draw_initial_theta(priors, model_kind, rng)
        try:
            v0 = to_unconstrained(theta0, model_kind)
        except ValueError:  # a heavy-tailed prior draw can underflow to 0
            continue
        lp0 = log_target(v0, imputed)
        if lp0 > current_lp:
            v, current_lp = v0, lp0
    if v is None:
        raise RuntimeError(
            "could not find a starting point with finite posterior in 100 prior draws"
        )

    d = v.size
    log_step = np.log(0.5)
    chol = np.eye(d)

    def propose():
        nonlocal v, current_lp
        proposal = v + np.exp(log_step) * (chol @ rng.standard_normal(d))
        prop_lp = log_target(proposal, imputed)
        log_u = np.log(rng.random())  # always drawn, for stream reproducibility
        if np.isfinite(prop_lp) and not np.isfinite(current_lp):
            # a stale imputed value can strand the current state at -inf;
            # any finite proposal escapes it
            accepted, log_ratio = True, 0.0
        else:
            log_ratio = prop_lp - current_lp
            if not np.isfinite(log_ratio):
                log_ratio = -np.inf  # covers -inf proposals and NaN from -inf - -inf
            accepted = log_u < log_ratio
        if accepted:
            v = proposal
            current_lp = prop_lp
        return accepted, log_ratio

    def imputation_sweep():
        nonlocal imputed, current_lp
        if idx.size == 0:
            return
        theta = from_unconstrained(v, model_kind)
        params = _params_from_theta(theta, model_kind, data.u)
        gev = gev_from_bmot(params).gev if model_kind == MODEL_CENSORED else params
        imputed = _impute_intervals(lo, hi, gev, imputed, rng)
        current_lp = log_target(v, imputed)

    # Warmup: Robbins-Monro tuning of the global step toward the target
    # acceptance throughout, plus proposal covariance re-estimated over
    # doubling windows.  Resetting the accumulator at window boundaries keeps
    # the transit from an overdispersed start out of the final estimate.  The
    # kernel is frozen after warmup, preserving detailed balance.
    step_only = max(25, cfg.n_warmup // 10)
    window = max(25, cfg.n_warmup // 20)
    next_switch = min(step_only + window, cfg.n_warmup)
    mean = np.zeros(d)
    m2 = np.zeros((d, d))
    n_stats = 0
    t_rm = 0
    warm_accepts = 0
    best_v, best_lp = v.copy(), current_lp
    for t in range(cfg.n_warmup):
        accepted, log_ratio = propose()
        warm_accepts += accepted
        if current_lp > best_lp:
            best_v, best_lp = v.copy(), current_lp
        accept_prob = min(1.0, np.exp(min(log_ratio, 0.0)))
        log_step += (t_rm + 10.0) ** -0.6 * (accept_prob - cfg.target_accept)
        t_rm += 1
        if t >= step_only:
            n_stats += 1
            delta = v - mean
            mean += delta / n_stats
            m2 += np.outer(delta, v - mean)
        if t + 1 == next_switch:
            if n_stats >= 2 * d:
                cov = m2 / (n_stats - 1)
                # trace-proportional diagonal floor: a window spent on a flat
                # shelf can collapse single directions, freezing the chain there
                floor = 1e-10 + 0.02 * np.trace(cov) / d
                chol = np.linalg.cholesky(cov + floor * np.eye(d))
                t_rm = 0
            mean = np.zeros(d)
            m2 = np.zeros((d, d))
            n_stats = 0
            window *= 2
            next_switch = t + 1 + window
            if cfg.n_warmup - next_switch < window:
                next_switch = cfg.n_warmup
            # a chain that wandered onto a saturated shelf far below its best
            # point cannot walk back once the kernel contracts; warmup is not
            # part of the kept chain, so restart it from the incumbent
            lp_at_best = log_target(best_v, imputed)
            if current_lp < lp_at_best - 50.0 and np.isfinite(lp_at_best):
                v = best_v.copy()
                current_lp = lp_at_best
        imputation_sweep()
    if warm_accepts / cfg.n_warmup < 0.01:
        raise RuntimeError(
            f"proposal adaptation failed: warmup acceptance rate "
            f"{warm_accepts / cfg.n_warmup:.4f} < 0.01"
        )

    draws = np.empty((cfg.n_draws, d))
    imputed_draws = np.empty((cfg.n_draws, idx.size))
    accepts = 0
    for t in range(cfg.n_draws):
        accepted, _ = propose()
        accepts += accepted
        imputation_sweep()
        draws[t] = from_unconstrained(v, model_kind)
        imputed_draws[t] = imputed
    return draws, imputed_draws, accepts / cfg.n_draws


def run_chains(
    data: Dataset,
    model_kind: str,
    priors: PriorConfig,
    cfg: SamplerConfig,
    impute: bool = True,
    jobs: int = 1,
) -> PosteriorSamples:
    """Run independent adaptive Metropolis chains and merge their draws.

    An R-hat above the configured threshold flags the result (``converged``
    is False) but is not an error.  With ``jobs > 1`` chains run in separate
    processes; results are identical to the sequential path.
    """
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind: {model_kind!r}")
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    args = [(data, model_kind, priors, cfg, s, impute) for s in streams]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.n_chains)) as pool:
            results = list(pool.map(_run_single_chain_star, args))
    else:
        results = [_run_single_chain(*a) for a in args]

    draws = np.stack([r[0] for r in results])
    imputed = np.stack([r[1] for r in results])
    accept_rate = np.array([r[2] for r in results])
    rhat = np.array([gelman_rubin(draws[:, :, k]) for k in range(draws.shape[2])])
    idx = data.imputable_indices(model_kind) if impute else np.empty(0, dtype=int)
    return PosteriorSamples(
        draws=draws,
        param_names=PARAM_NAMES[model_kind],
        model_kind=model_kind,
        u=data.u,
        seed=cfg.seed,
        accept_rate=accept_rate,
        rhat=rhat,
        rhat_threshold=cfg.rhat_threshold,
        imputed=imputed if idx.size else None,
        imputable_indices=idx,
    )


def _run_single_chain_star(args):
    return _run_single_chain(*args)


def gelman_rubin(chains) -> float:
    """Split-chain potential scale reduction factor for one parameter.

    Each chain is halved, then R-hat = sqrt(((n-1)/n * W + B/n) / W) over the
    split chains, with W the mean within-chain variance and B the
    between-chain variance of the split-chain means.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected a (n_chains, n_draws) array")
    m, n = chains.shape
    if m < 2:
        raise ValueError("need at least 2 chains")
    if n < 4:
        raise ValueError("need at least 4 draws per chain to split")
    half = n // 2
    split = np.concatenate([chains[:, :half], chains[:, half : 2 * half]], axis=0)
    n = half
    within = np.mean(np.var(split, axis=1, ddof=1))
    if within == 0.0:
        raise ValueError("chains are degenerate: within-chain variance is zero")
    between = n * np.var(np.mean(split, axis=1), ddof=1)
    var_hat = (n - 1) / n * within + between / n
    return float(np.sqrt(var_hat / within))


def hdi(samples, mass: float = 0.95) -> tuple[float, float]:
    """Shortest contiguous interval of sorted samples holding ceil(mass*N) points."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("cannot compute an interval from an empty sample")
    if not 0.0 < mass <= 1.0:
        raise ValueError("mass must lie in (0, 1]")
    m = int(np.ceil(mass * x.size))
    widths = x[m - 1 :] - x[: x.size - m + 1]
    k = int(np.argmin(widths))
    return float(x[k]), float(x[k + m - 1])
