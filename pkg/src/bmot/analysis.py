"""Inference workflows built on the sampler.

Threshold-stability scanning with automated selection, posterior fitting for
the censored and standard models, posterior-predictive and QQ fit
assessment, and extrapolation to unobserved tubes: the distribution of the
maximum wall loss over a bundle and the count of pits deeper than a given
depth.  All outputs have CSV / JSON exporters with plot-ready columns.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import dists
from .dists import GevParams
from .model import (
    MODEL_CENSORED,
    MODEL_STANDARD,
    BmotParams,
    Dataset,
    PriorConfig,
    sample_tube_maximum,
)
from .sampler import PosteriorSamples, SamplerConfig, hdi, run_chains

REPORT_SCHEMA_VERSION = 1


def _float_str(x: float) -> str:
    """Floats are printed with 17 significant digits so they round-trip exactly."""
    return format(float(x), ".17g")


def _derived_gev_arrays(samples: PosteriorSamples):
    """Per-draw GEV (mu, sigma) and GPD scale for a censored-model chain."""
    flat = samples.flat()
    lam, sigma, xi = flat[:, 0], flat[:, 1], flat[:, 2]
    log_lam = np.log(lam)
    near_zero = np.abs(xi) < dists.XI_ZERO_TOL
    safe_xi = np.where(near_zero, 1.0, xi)
    mu = samples.u + np.where(
        near_zero,
        sigma * log_lam,
        -sigma * np.expm1(-xi * log_lam) / safe_xi,
    )
    sigma_tilde = sigma * np.exp(-xi * log_lam)
    return mu, sigma, sigma_tilde, xi, lam


def posterior_gev_draws(samples: PosteriorSamples) -> np.ndarray:
    """(mu, sigma, xi) per pooled draw, derived for the censored model."""
    flat = samples.flat()
    if samples.model_kind == MODEL_STANDARD:
        return flat.copy()
    mu, sigma, _, xi, _ = _derived_gev_arrays(samples)
    return np.column_stack([mu, sigma, xi])


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    hdi_lo: float
    hdi_hi: float


@dataclass(frozen=True)
class FitReport:
    """Posterior summaries and diagnostics for one model fit."""

    model_kind: str
    u: float | None
    summaries: dict[str, ParamSummary]
    prob_xi_positive: float
    rhat: dict[str, float]
    accept_rate: tuple[float, ...]
    converged: bool
    n_chains: int
    n_draws: int
    seed: int


def _summarize(values: np.ndarray) -> ParamSummary:
    lo, hi = hdi(values, 0.95)
    return ParamSummary(
        mean=float(np.mean(values)), sd=float(np.std(values, ddof=1)), hdi_lo=lo, hdi_hi=hi
    )


def fit(
    values,
    half_widths,
    model_kind: str,
    u: float | None,
    priors: PriorConfig,
    cfg: SamplerConfig,
    impute: bool = True,
    jobs: int = 1,
) -> tuple[FitReport, PosteriorSamples]:
    """Fit one model and summarize its posterior.

    For the censored model the report includes the derived GEV location
    chain; ``prob_xi_positive`` is the fraction of draws with a positive
    shape parameter.
    """
    values = np.asarray(values, dtype=float)
    half_widths = np.asarray(half_widths, dtype=float)
    if model_kind == MODEL_CENSORED:
        if u is None or not np.isfinite(u):
            raise ValueError("the censored model needs a finite threshold")
        data = Dataset(values=values, half_widths=half_widths, u=float(u))
    else:
        data = Dataset(values=values, half_widths=half_widths, u=-np.inf)
    samples = run_chains(data, model_kind, priors, cfg, impute=impute, jobs=jobs)

    summaries: dict[str, ParamSummary] = {}
    for k, name in enumerate(samples.param_names):
        summaries[name] = _summarize(samples.flat()[:, k])
    if model_kind == MODEL_CENSORED:
        mu, _, _, _, _ = _derived_gev_arrays(samples)
        summaries["mu"] = _summarize(mu)
    xi = samples.column("xi")
    report = FitReport(
        model_kind=model_kind,
        u=float(u) if model_kind == MODEL_CENSORED else None,
        summaries=summaries,
        prob_xi_positive=float(np.mean(xi > 0.0)),
        rhat={name: float(r) for name, r in zip(samples.param_names, samples.rhat)},
        accept_rate=tuple(float(a) for a in samples.accept_rate),
        converged=samples.converged,
        n_chains=samples.draws.shape[0],
        n_draws=samples.draws.shape[1],
        seed=cfg.seed,
    )
    return report, samples


@dataclass(frozen=True)
class ThresholdScanRow:
    u: float
    n_plus: int
    xi_mean: float
    xi_hdi: tuple[float, float]
    rhat_max: float
    kind: str = MODEL_CENSORED  # the standard-GEV reference row carries u = 0


def derive_lambda_prior(template: PriorConfig, n: int, n_minus: int) -> PriorConfig:
    """Re-derive the exceedance-rate prior from the censoring split.

    The prior mean is -ln(n_minus / n); the variance is kept at the
    template's value.  The split counts are clamped half a count away from
    the degenerate edges so the mean stays positive and finite.
    """
    clamped = min(max(float(n_minus), 0.5), n - 0.5)
    mean = -np.log(clamped / n)
    variance = template.alpha_lambda / template.beta_lambda**2
    return replace(
        template, alpha_lambda=mean * mean / variance, beta_lambda=mean / variance
    )


def _row_seed(cfg: SamplerConfig, index: int) -> SamplerConfig:
    child = np.random.SeedSequence((cfg.seed, index)).generate_state(1)[0]
    return replace(cfg, seed=int(child))


def threshold_scan(
    values,
    half_widths,
    candidates,
    priors_template: PriorConfig,
    cfg: SamplerConfig,
    jobs: int = 1,
) -> list[ThresholdScanRow]:
    """Fit the censored model at each candidate threshold.

    Emits one row per candidate (ascending) plus a standard-GEV reference
    row at the u = 0 slot.  The exceedance-rate prior mean is re-derived per
    candidate from the observed split; all other hyperparameters come from
    the template.
    """
    values = np.asarray(values, dtype=float)
    half_widths = np.asarray(half_widths, dtype=float)
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("need at least one candidate threshold")
    n = values.size

    n_plus_largest = int(np.sum(values > candidates[-1]))
    if n_plus_largest < 30:
        warnings.warn(
            f"only {n_plus_largest} exceedances at the largest candidate threshold; "
            "shape estimates will be unstable",
            stacklevel=2,
        )

    rows: list[ThresholdScanRow] = []
    report, _ = fit(values, half_widths, MODEL_STANDARD, None, priors_template, _row_seed(cfg, 0))
    s = report.summaries["xi"]
    rows.append(
        ThresholdScanRow(
            u=0.0,
            n_plus=n,
            xi_mean=s.mean,
            xi_hdi=(s.hdi_lo, s.hdi_hi),
            rhat_max=max(report.rhat.values()),
            kind=MODEL_STANDARD,
        )
    )
    for k, u in enumerate(candidates, start=1):
        n_minus = int(np.sum(values <= u))
        priors = derive_lambda_prior(priors_template, n, n_minus)
        report, _ = fit(
            values, half_widths, MODEL_CENSORED, u, priors, _row_seed(cfg, k), jobs=jobs
        )
        s = report.summaries["xi"]
        rows.append(
            ThresholdScanRow(
                u=u,
                n_plus=n - n_minus,
                xi_mean=s.mean,
                xi_hdi=(s.hdi_lo, s.hdi_hi),
                rhat_max=max(report.rhat.values()),
            )
        )
    return rows


def select_threshold(rows: list[ThresholdScanRow]) -> float:
    """Automated stability rule over a threshold scan.

    Returns the smallest candidate whose 95% shape interval contains the
    posterior mean shape of every higher candidate; if none qualifies, falls
    back to the candidate minimizing interval width times the distance of
    its mean shape from the highest candidate's.  The full scan table should
    always be shown alongside so the choice can be overridden.
    """
    cens = sorted((r for r in rows if r.kind == MODEL_CENSORED), key=lambda r: r.u)
    if len(cens) < 3:
        raise ValueError(f"need at least 3 candidate rows to select a threshold, got {len(cens)}")
    for i, row in enumerate(cens):
        lo, hi = row.xi_hdi
        if all(lo <= later.xi_mean <= hi for later in cens[i + 1 :]):
            return row.u
    last_mean = cens[-1].xi_mean
    scores = [(r.xi_hdi[1] - r.xi_hdi[0]) * abs(r.xi_mean - last_mean) for r in cens]
    return cens[int(np.argmin(scores))].u


@dataclass(frozen=True)
class PosteriorPredictive:
    """Pooled replicated observations; atom replicates are flagged, not spread."""

    values: np.ndarray
    at_atom: np.ndarray  # True where the replicate is the censored atom ("<= u")
    upper_hdi_95: float


def posterior_predictive(
    samples: PosteriorSamples,
    data: Dataset,
    rng: np.random.Generator,
    n_rep_per_draw: int = 1,
) -> PosteriorPredictive:
    """Simulate one dataset-sized replicate per posterior draw (per repeat)."""
    n = data.n * n_rep_per_draw
    flat = samples.flat()
    out = np.empty((flat.shape[0], n))
    if samples.model_kind == MODEL_CENSORED:
        _, _, sigma_tilde, xi, lam = _derived_gev_arrays(samples)
        for i in range(flat.shape[0]):
            p = BmotParams(
                lambda_u=lam[i], sigma_tilde_u=sigma_tilde[i], xi=xi[i], u=samples.u
            )
            out[i] = sample_tube_maximum(p, rng, size=n)
        at_atom = out == samples.u
    else:
        for i in range(flat.shape[0]):
            gev = GevParams(mu=flat[i, 0], sigma=flat[i, 1], xi=flat[i, 2])
            out[i] = dists.gev_sample(gev, rng, size=n)
        at_atom = np.zeros_like(out, dtype=bool)
    pooled = out.ravel()
    return PosteriorPredictive(
        values=pooled, at_atom=at_atom.ravel(), upper_hdi_95=hdi(pooled, 0.95)[1]
    )


@dataclass(frozen=True)
class QqRow:
    empirical_q: float
    model_q_mean: float
    model_q_hdi: tuple[float, float]


def qq_data(samples: PosteriorSamples, data: Dataset) -> list[QqRow]:
    """Per-rounding-bin empirical quantiles against posterior model quantiles.

    Plotting positions are i/(n+1) with tied (same-bin) observations sharing
    their mid-rank.  For the censored model the comparison conditions on
    exceeding the threshold, so bins at or below u emit no rows.
    """
    if samples.model_kind == MODEL_CENSORED:
        obs = np.sort(data.values[data.values > samples.u])
    else:
        obs = np.sort(data.values)
    n = obs.size
    if n == 0:
        return []
    gev = posterior_gev_draws(samples)
    mu, sigma, xi = gev[:, 0], gev[:, 1], gev[:, 2]
    near_zero = np.abs(xi) < dists.XI_ZERO_TOL
    safe_xi = np.where(near_zero, 1.0, xi)
    if samples.model_kind == MODEL_CENSORED:
        # conditional-on-exceedance renormalization over [u, inf)
        _, _, sigma_tilde, _, lam = _derived_gev_arrays(samples)
        f_u = np.exp(-lam)

    rows: list[QqRow] = []
    bins, first_index, counts = np.unique(obs, return_index=True, return_counts=True)
    for value, start, count in zip(bins, first_index, counts):
        midrank = start + (count + 1) / 2.0  # 1-based mid-rank of the tied block
        p = midrank / (n + 1)
        if samples.model_kind == MODEL_CENSORED:
            q_level = f_u + p * (1.0 - f_u)
        else:
            q_level = np.full_like(mu, p)
        log_neg_log = np.log(-np.log(q_level))
        model_q = mu + np.where(
            near_zero,
            -sigma * log_neg_log,
            sigma * np.expm1(-xi * log_neg_log) / safe_xi,
        )
        lo, hi = hdi(model_q, 0.95)
        rows.append(QqRow(float(value), float(np.mean(model_q)), (lo, hi)))
    return rows


@dataclass(frozen=True)
class MaxWallLossPrediction:
    draws: np.ndarray
    hdi_95: tuple[float, float]
    upper_hdi_95: float


def _bundle_gev_draws(samples: PosteriorSamples, n_star: int):
    """Per-draw GEV parameters of the maximum over n_star tubes."""
    if samples.model_kind == MODEL_CENSORED:
        _, _, sigma_tilde, xi, lam = _derived_gev_arrays(samples)
        lam_bundle = n_star * lam
        log_lam = np.log(lam_bundle)
        near_zero = np.abs(xi) < dists.XI_ZERO_TOL
        safe_xi = np.where(near_zero, 1.0, xi)
        mu = samples.u + np.where(
            near_zero,
            sigma_tilde * log_lam,
            sigma_tilde * np.expm1(xi * log_lam) / safe_xi,
        )
        sigma = sigma_tilde * np.exp(xi * log_lam)
        return mu, sigma, xi
    flat = samples.flat()
    mu0, sigma0, xi = flat[:, 0], flat[:, 1], flat[:, 2]
    log_n = np.log(n_star)
    near_zero = np.abs(xi) < dists.XI_ZERO_TOL
    safe_xi = np.where(near_zero, 1.0, xi)
    mu = mu0 + np.where(near_zero, sigma0 * log_n, sigma0 * np.expm1(xi * log_n) / safe_xi)
    sigma = sigma0 * np.exp(xi * log_n)
    return mu, sigma, xi


def predict_max_wall_loss(
    samples: PosteriorSamples,
    n_star: int,
    rng: np.random.Generator,
    brute_force: bool = False,
) -> MaxWallLossPrediction:
    """One realization per posterior draw of the maximum over n_star tubes.

    The default draws from the closed-form bundle law (max-stability); the
    brute-force path simulates n_star tube maxima per draw and keeps the
    largest, which is equal in distribution but O(n_star) slower.
    """
    if n_star < 1:
        raise ValueError(f"n_star must be a positive integer, got {n_star}")
    flat = samples.flat()
    if brute_force:
        out = np.empty(flat.shape[0])
        if samples.model_kind == MODEL_CENSORED:
            _, _, sigma_tilde, xi, lam = _derived_gev_arrays(samples)
            for i in range(flat.shape[0]):
                p = BmotParams(
                    lambda_u=lam[i], sigma_tilde_u=sigma_tilde[i], xi=xi[i], u=samples.u
                )
                out[i] = np.max(sample_tube_maximum(p, rng, size=n_star))
        else:
            for i in range(flat.shape[0]):
                gev = GevParams(mu=flat[i, 0], sigma=flat[i, 1], xi=flat[i, 2])
                out[i] = np.max(dists.gev_sample(gev, rng, size=n_star))
    else:
        mu, sigma, xi = _bundle_gev_draws(samples, n_star)
        v = rng.random(flat.shape[0])
        near_zero = np.abs(xi) < dists.XI_ZERO_TOL
        safe_xi = np.where(near_zero, 1.0, xi)
        log_neg_log = np.log(-np.log(v))
        out = mu + np.where(
            near_zero, -sigma * log_neg_log, sigma * np.expm1(-xi * log_neg_log) / safe_xi
        )
        if samples.model_kind == MODEL_CENSORED:
            # quantile draws below u correspond to the atom (no tube exceeds u)
            out = np.maximum(out, samples.u)
    interval = hdi(out, 0.95)
    return MaxWallLossPrediction(draws=out, hdi_95=interval, upper_hdi_95=interval[1])


@dataclass(frozen=True)
class ExceedanceCountPrediction:
    draws: np.ndarray
    mean: float
    hdi_95: tuple[float, float]


def expected_exceedance_count(
    samples: PosteriorSamples,
    depth: float,
    n_star: int,
    rng: np.random.Generator,
) -> ExceedanceCountPrediction:
    """Posterior of the number of pits deeper than ``depth`` in n_star tubes.

    Per posterior draw the per-tube rate of such pits is the exceedance rate
    scaled by the GPD survival at the depth; the count is Poisson with the
    bundle rate.  Censored-model chains only; depth must not sit below the
    threshold.
    """
    if samples.model_kind != MODEL_CENSORED:
        raise ValueError("exceedance counts are defined for the censored model only")
    if depth < samples.u:
        raise ValueError(f"depth {depth} lies below the threshold u={samples.u}")
    if n_star < 1:
        raise ValueError(f"n_star must be a positive integer, got {n_star}")
    _, _, sigma_tilde, xi, lam = _derived_gev_arrays(samples)
    z = (depth - samples.u) / sigma_tilde
    near_zero = np.abs(xi) < dists.XI_ZERO_TOL
    safe_xi = np.where(near_zero, 1.0, xi)
    w = 1.0 + xi * z
    with np.errstate(divide="ignore", over="ignore"):
        survival = np.where(
            near_zero,
            np.exp(-z),
            np.where(w > 0.0, np.exp(-np.log(np.maximum(w, 1e-300)) / safe_xi), 0.0),
        )
    rate = n_star * lam * survival
    u01 = rng.random(rate.size)
    counts = np.where(rate > 0.0, stats.poisson.ppf(u01, np.maximum(rate, 1e-300)), 0.0)
    counts = counts.astype(np.int64)
    lo, hi = hdi(counts.astype(float), 0.95)
    return ExceedanceCountPrediction(
        draws=counts, mean=float(np.mean(counts)), hdi_95=(lo, hi)
    )


# ---------------------------------------------------------------------------
# exporters


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_chains_csv(samples: PosteriorSamples, path) -> None:
    """chain, draw, parameter columns; the censored model adds the derived mu."""
    n_chains, n_draws, _ = samples.draws.shape
    chain_col = np.repeat(np.arange(n_chains), n_draws)
    draw_col = np.tile(np.arange(n_draws), n_chains)
    flat = samples.flat()
    header = ["chain", "draw", *samples.param_names]
    columns = [flat[:, k] for k in range(flat.shape[1])]
    if samples.model_kind == MODEL_CENSORED:
        mu, _, _, _, _ = _derived_gev_arrays(samples)
        header.append("mu")
        columns.append(mu)
    rows = (
        [str(c), str(d), *(_float_str(col[i]) for col in columns)]
        for i, (c, d) in enumerate(zip(chain_col, draw_col))
    )
    _write_csv(path, header, rows)


def load_chains_csv(path, model_kind: str, u: float, seed: int = 0) -> PosteriorSamples:
    """Rebuild a PosteriorSamples value from an exported chains CSV."""
    from .sampler import PARAM_NAMES, gelman_rubin

    names = PARAM_NAMES[model_kind]
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader]
    col = {name: header.index(name) for name in ("chain", "draw", *names)}
    chains = sorted({int(r[col["chain"]]) for r in rows})
    n_draws = len(rows) // len(chains)
    draws = np.empty((len(chains), n_draws, len(names)))
    for r in rows:
        c, d = int(r[col["chain"]]), int(r[col["draw"]])
        for k, name in enumerate(names):
            draws[c, d, k] = float(r[col[name]])
    rhat = np.array([gelman_rubin(draws[:, :, k]) for k in range(len(names))])
    return PosteriorSamples(
        draws=draws,
        param_names=names,
        model_kind=model_kind,
        u=u,
        seed=seed,
        accept_rate=np.full(len(chains), np.nan),
        rhat=rhat,
        rhat_threshold=SamplerConfig().rhat_threshold,
    )


def write_scan_csv(rows: list[ThresholdScanRow], path) -> None:
    _write_csv(
        path,
        ["u", "n_plus", "xi_mean", "xi_hdi_lo", "xi_hdi_hi", "rhat_max"],
        (
            [
                _float_str(r.u),
                str(r.n_plus),
                _float_str(r.xi_mean),
                _float_str(r.xi_hdi[0]),
                _float_str(r.xi_hdi[1]),
                _float_str(r.rhat_max),
            ]
            for r in rows
        ),
    )


def write_qq_csv(rows: list[QqRow], path) -> None:
    _write_csv(
        path,
        ["empirical_q", "model_q_mean", "model_q_hdi_lo", "model_q_hdi_hi"],
        (
            [
                _float_str(r.empirical_q),
                _float_str(r.model_q_mean),
                _float_str(r.model_q_hdi[0]),
                _float_str(r.model_q_hdi[1]),
            ]
            for r in rows
        ),
    )


def write_predictive_csv(pred: PosteriorPredictive, path) -> None:
    _write_csv(
        path,
        ["value", "at_or_below_threshold"],
        (
            [_float_str(v), "1" if a else "0"]
            for v, a in zip(pred.values, pred.at_atom)
        ),
    )


def write_max_prediction_csv(pred: MaxWallLossPrediction, path) -> None:
    _write_csv(
        path,
        ["draw", "max_wall_loss"],
        ([str(i), _float_str(v)] for i, v in enumerate(pred.draws)),
    )


def write_exceedance_csv(pred: ExceedanceCountPrediction, path) -> None:
    _write_csv(
        path,
        ["draw", "count"],
        ([str(i), str(int(v))] for i, v in enumerate(pred.draws)),
    )


def write_histogram_csv(values, path, bins: int = 30) -> None:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    _write_csv(
        path,
        ["bin_lo", "bin_hi", "count"],
        (
            [_float_str(edges[i]), _float_str(edges[i + 1]), str(int(c))]
            for i, c in enumerate(counts)
        ),
    )


def write_ecdf_csv(values, path) -> None:
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    _write_csv(
        path,
        ["value", "ecdf"],
        ([_float_str(v), _float_str((i + 1) / n)] for i, v in enumerate(x)),
    )


def report_to_dict(report: FitReport, version: str) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": version,
        "model_kind": report.model_kind,
        "u": report.u,
        "parameters": {
            name: {"mean": s.mean, "sd": s.sd, "hdi_lo": s.hdi_lo, "hdi_hi": s.hdi_hi}
            for name, s in report.summaries.items()
        },
        "prob_xi_positive": report.prob_xi_positive,
        "rhat": report.rhat,
        "accept_rate": list(report.accept_rate),
        "converged": report.converged,
        "n_chains": report.n_chains,
        "n_draws": report.n_draws,
        "seed": report.seed,
    }


def write_report_json(report: FitReport, path, version: str) -> None:
    with open(path, "w") as f:
        json.dump(report_to_dict(report, version), f, indent=2, sort_keys=True)
        f.write("\n")
