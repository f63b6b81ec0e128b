"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v`` for per-criterion pass/fail
lines (add ``-s`` to see the printed measurements).  Criterion 6's Gamma
prior-interval targets are strict expected failures: the reference interval
values are equal-tailed quantile intervals (and, for the scale prior, imply
a different variance than the configured hyperparameters), so no shortest-
interval computation can reproduce them; the tests print the measured and
reconciled values.  Everything else passes.
"""
import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import integrate, special, stats

from bmot import dists
from bmot.cli import EXIT_OK, main
from bmot.dists import GevParams
from bmot.model import (
    BmotParams,
    Dataset,
    PriorConfig,
    bmot_from_gev,
    bundle_max_params,
    censored_gev_cdf,
    gev_from_bmot,
    sample_tube_maximum,
)
from bmot.sampler import SamplerConfig, gelman_rubin, hdi, run_chains
from bmot.simstudy import desk_grid, run_study

JOBS = 2


def report(criterion, message):
    print(f"[criterion {criterion}] PASS: {message}")


# ---------------------------------------------------------------------------
# 1. distribution layer exactness


def test_criterion_01_distribution_layer_exactness():
    # CDF-quantile round trips within 1e-10
    worst = 0.0
    q = np.linspace(1e-4, 1 - 1e-4, 500)
    for xi in (-0.3, -0.1, -1e-12, 0.0, 1e-12, 0.1, 0.3):
        for mu, sigma in [(0.0, 1.0), (0.12, 0.02), (-3.0, 7.0)]:
            p = GevParams(mu=mu, sigma=sigma, xi=xi)
            back = dists.gev_cdf(dists.gev_quantile(q, p), p)
            worst = max(worst, float(np.max(np.abs(back - q))))
    assert worst < 1e-10

    # densities integrate to 1 within 1e-6 by quadrature
    worst_integral = 0.0
    for xi in (-0.3, -0.1, 0.0, 0.1, 0.3):
        p = GevParams(mu=0.3, sigma=0.8, xi=xi)
        total, _ = integrate.quad(
            lambda x: np.exp(dists.gev_log_density(x, p)),
            p.lower_endpoint,
            p.upper_endpoint,
        )
        worst_integral = max(worst_integral, abs(total - 1.0))
    assert worst_integral < 1e-6

    # Gumbel / exponential limit agreement within 1e-8 at |xi| = 1e-12
    p = GevParams(mu=0.5, sigma=1.3, xi=1e-12)
    for x in (-1.0, 0.5, 3.0):
        z = (x - 0.5) / 1.3
        gumbel_logf = -np.log(1.3) - z - np.exp(-z)
        assert abs(dists.gev_log_density(x, p) - gumbel_logf) < 1e-8
        assert abs(dists.gev_cdf(x, p) - np.exp(-np.exp(-z))) < 1e-8
    gpd = dists.GpdParams(sigma_tilde=0.5, xi=-1e-12, threshold=1.0)
    for x in (1.0, 1.8, 3.2):
        assert abs(dists.gpd_survival(x, gpd) - np.exp(-(x - 1.0) / 0.5)) < 1e-8
    report(1, f"round-trip error {worst:.2e}, density integral error {worst_integral:.2e}")


# ---------------------------------------------------------------------------
# 2. parameter-transform round trip


def test_criterion_02_transform_round_trip():
    rng = np.random.default_rng(2026)
    lam = np.exp(rng.uniform(np.log(0.05), np.log(50.0), 1000))
    sigma_tilde = np.exp(rng.uniform(np.log(1e-3), np.log(10.0), 1000))
    xi = rng.uniform(-0.45, 0.45, 1000)
    xi[:100] = rng.uniform(-1e-6, 1e-6, 100)  # straddle the Gumbel switch
    u = rng.uniform(-1.0, 1.0, 1000)
    worst = 0.0
    for l, s, x, t in zip(lam, sigma_tilde, xi, u):
        p = BmotParams(lambda_u=l, sigma_tilde_u=s, xi=x, u=t)
        back = bmot_from_gev(gev_from_bmot(p))
        worst = max(
            worst,
            abs(back.lambda_u - l) / l,
            abs(back.sigma_tilde_u - s) / s,
        )
    assert worst < 1e-12
    report(2, f"worst relative round-trip error {worst:.2e} over 1000 parameter sets")


# ---------------------------------------------------------------------------
# 3. generative-analytic equivalence over the 9-point grid


def test_criterion_03_generative_analytic_equivalence():
    n = 100_000
    worst_ks, worst_atom_z = 0.0, 0.0
    for xi in (-0.2, 0.0, 0.2):
        for lam in (0.5, 2.0, 8.0):
            p = BmotParams(lambda_u=lam, sigma_tilde_u=1.0, xi=xi, u=0.0)
            rng = np.random.default_rng((77, int(10 * xi) + 10, int(lam * 2)))
            draws = sample_tube_maximum(p, rng, size=n)
            atom = np.exp(-lam)
            freq = float(np.mean(draws == 0.0))
            se = np.sqrt(atom * (1.0 - atom) / n)
            z = abs(freq - atom) / se
            worst_atom_z = max(worst_atom_z, z)
            assert z < 3.0, (xi, lam)
            exc = draws[draws > 0.0]
            c = gev_from_bmot(p)
            cond = lambda x: (censored_gev_cdf(x, c) - atom) / (1.0 - atom)
            ks = stats.kstest(exc, cond).statistic
            worst_ks = max(worst_ks, ks)
            assert ks < 0.01, (xi, lam)
    report(3, f"worst continuous-part KS {worst_ks:.4f}, worst atom z-score {worst_atom_z:.2f}")


# ---------------------------------------------------------------------------
# 4. max-stability of the bundle maximum


def test_criterion_04_bundle_max_stability():
    from dataclasses import replace

    p = BmotParams(lambda_u=2.0, sigma_tilde_u=1.0, xi=-0.1, u=0.0)
    n_tubes, n_rep = 2000, 100_000
    bundle = bundle_max_params(p, n_tubes)
    assert bundle.gev == gev_from_bmot(replace(p, lambda_u=n_tubes * p.lambda_u)).gev

    rng = np.random.default_rng(404)
    chunk = 10_000
    maxima = np.empty(n_rep)
    for k in range(0, n_rep, chunk):
        block = sample_tube_maximum(p, rng, size=n_tubes * chunk)
        maxima[k : k + chunk] = block.reshape(chunk, n_tubes).max(axis=1)
    ks = stats.kstest(maxima, lambda x: censored_gev_cdf(np.maximum(x, 0.0), bundle)).statistic
    assert ks < 0.01
    report(4, f"KS closed form vs 10^5 brute-force maxima of {n_tubes} tubes: {ks:.4f}")


# ---------------------------------------------------------------------------
# 5. sampler correctness: conjugacy and coverage calibration


def test_criterion_05a_conjugate_submodel():
    n = 50
    with pytest.warns(UserWarning, match="no observations exceed"):
        data = Dataset(values=np.full(n, 0.05), half_widths=np.zeros(n), u=0.11)
    priors = PriorConfig(alpha_sigma=2.0, beta_sigma=1.0)
    cfg = SamplerConfig(n_chains=8, n_warmup=1000, n_draws=4000, seed=42)
    res = run_chains(data, "censored", priors, cfg)
    lam = res.draws[:, :, 0]
    a, b = priors.alpha_lambda, priors.beta_lambda + n
    mean_se = np.std(lam.mean(axis=1), ddof=1) / np.sqrt(lam.shape[0])
    var_se = np.std(lam.var(axis=1, ddof=1), ddof=1) / np.sqrt(lam.shape[0])
    mean_err = abs(lam.mean() - a / b)
    var_err = abs(lam.reshape(-1).var(ddof=1) - a / b**2)
    assert mean_err < 3 * mean_se
    assert var_err < 3 * var_se
    report(
        5,
        f"(a) conjugate Gamma({a}, {b}) posterior: mean error {mean_err:.2e} "
        f"(3se {3*mean_se:.2e}), variance error {var_err:.2e} (3se {3*var_se:.2e})",
    )


CAL_TRUTH = BmotParams(lambda_u=2.0, sigma_tilde_u=1.0, xi=-0.1, u=0.0)
CAL_TRUE_VALUES = {"lambda_u": 2.0, "sigma": 2.0**-0.1, "xi": -0.1}


def _calibration_rep(rep):
    root = np.random.SeedSequence((424242, rep)).spawn(2)
    values = sample_tube_maximum(CAL_TRUTH, np.random.default_rng(root[0]), size=500)
    data = Dataset(values=values, half_widths=np.zeros(500), u=0.0)
    m = -np.log(max(data.n_minus, 0.5) / data.n)
    sd = float(np.std(values))
    priors = PriorConfig(
        alpha_lambda=m * m, beta_lambda=m, alpha_sigma=0.25, beta_sigma=0.25 / sd
    )
    res = run_chains(
        data, "censored", priors, SamplerConfig(seed=int(root[1].generate_state(1)[0]))
    )
    covered = {}
    for name, truth in CAL_TRUE_VALUES.items():
        lo, hi = hdi(res.column(name), 0.95)
        covered[name] = lo <= truth <= hi
    return covered


def test_criterion_05b_coverage_calibration():
    with ProcessPoolExecutor(max_workers=JOBS) as pool:
        reps = list(pool.map(_calibration_rep, range(50)))
    coverages = {}
    for name in CAL_TRUE_VALUES:
        coverage = float(np.mean([r[name] for r in reps]))
        coverages[name] = coverage
        assert 0.85 <= coverage <= 1.0, name
    report(5, f"(b) 95% interval coverage over 50 replications: {coverages}")


# ---------------------------------------------------------------------------
# 6. prior reproduction of the reference intervals


def _prior_report(name, draws, target):
    lo, hi = hdi(draws, 0.95)
    qlo, qhi = np.quantile(draws, [0.025, 0.975])
    print(
        f"  {name}: shortest-interval HDI = ({lo:.3g}, {hi:.3g}); "
        f"equal-tailed = ({qlo:.3g}, {qhi:.3g}); reference target = {target}"
    )
    return lo, hi


def test_criterion_06_xi_prior_interval():
    cfg = PriorConfig()
    rng = np.random.default_rng(606)
    xi = special.expit(rng.normal(0.0, cfg.psi, 1_000_000)) - 0.5
    lo, hi = _prior_report("xi", xi, "(-0.44, 0.44)")
    assert abs(lo - (-0.44)) < 0.15 * 0.44
    assert abs(hi - 0.44) < 0.15 * 0.44
    report(6, f"xi prior 95% HDI ({lo:.3f}, {hi:.3f}) matches (-0.44, 0.44) within 15%")


@pytest.mark.xfail(
    strict=True,
    reason=(
        "the reference interval (0.006, 3.6) for the Gamma(0.7225, 0.85) "
        "exceedance-rate prior is its equal-tailed 95% interval, not a highest-density "
        "interval; the density is monotone decreasing, so the shortest 95% interval is "
        "(~0, ~2.87) and cannot match the reference end-points at any sample size"
    ),
)
def test_criterion_06_lambda_prior_interval():
    cfg = PriorConfig()
    rng = np.random.default_rng(607)
    draws = dists.gamma_sample(cfg.alpha_lambda, cfg.beta_lambda, rng, size=1_000_000)
    assert abs(np.mean(draws) - 0.85) < 0.15 * 0.85
    lo, hi = _prior_report("lambda_u", draws, "(0.006, 3.6)")
    assert abs(lo - 0.006) < 0.15 * 0.006
    assert abs(hi - 3.6) < 0.15 * 3.6


@pytest.mark.xfail(
    strict=True,
    reason=(
        "the reference interval (3.8e-11, 0.83) matches the equal-tailed 95% interval "
        "of Gamma(0.16, 1.6), i.e. a scale prior with standard deviation 0.25 rather "
        "than the configured variance-0.25 hyperparameters Gamma(0.04, 0.4); under the "
        "configured prior the shortest 95% interval is (~1e-148, ~0.48)"
    ),
)
def test_criterion_06_sigma_prior_interval():
    cfg = PriorConfig()
    rng = np.random.default_rng(608)
    draws = dists.gamma_sample(cfg.alpha_sigma, cfg.beta_sigma, rng, size=1_000_000)
    assert abs(np.mean(draws) - 0.1) < 0.15 * 0.1
    lo, hi = _prior_report("sigma", draws, "(3.8e-11, 0.83)")
    assert 3.8e-12 < lo < 3.8e-10  # order of magnitude on the tiny end
    assert abs(hi - 0.83) < 0.15 * 0.83


# ---------------------------------------------------------------------------
# 7. desk-scale replication of the simulation study


def test_criterion_07_desk_scale_simulation_study():
    results = run_study(desk_grid(20), seed=20260811, jobs=JOBS)
    by_scenario = {(r.scenario.xi_true, r.scenario.mu_gamma): r for r in results}

    def row(result, model, quantity):
        return next(
            r for r in result.rows if r.model == model and r.quantity == quantity
        )

    # (a) censored-model shape bias: 95% interval over replications contains 0
    for key, result in by_scenario.items():
        r = row(result, "censored", "shape")
        assert r.bias_hdi[0] <= 0.0 <= r.bias_hdi[1], (key, r.bias_hdi)

    # (b) standard-model shape bias significantly negative somewhere
    significant = [
        key
        for key, result in by_scenario.items()
        if row(result, "standard", "shape").bias_hdi[1] < 0.0
    ]
    assert significant, "no scenario showed significant negative standard-GEV shape bias"

    # (c) overconfident return levels in the high-overlap scenarios
    ratios = {}
    for key, result in by_scenario.items():
        if key[1] == 5.0:
            r = row(result, "standard", "return_level")
            ratios[key] = r.sd_ratio_mean
            assert r.sd_ratio_mean < 1.0, (key, r.sd_ratio_mean)

    excluded = {key: r.n_excluded for key, r in by_scenario.items()}
    report(
        7,
        f"shape-bias intervals contain 0 in all {len(by_scenario)} scenarios; "
        f"significant negative standard bias in {significant}; high-overlap "
        f"return-level sd ratios {ratios}; excluded replications {excluded}",
    )


# ---------------------------------------------------------------------------
# 8. split Gelman-Rubin oracle


def test_criterion_08_gelman_rubin_oracle():
    rng = np.random.default_rng(808)
    iid = rng.standard_normal((4, 10_000))
    r_iid = gelman_rubin(iid)
    assert 0.999 <= r_iid <= 1.01

    separated = np.vstack([rng.standard_normal(2000), 5.0 + rng.standard_normal(2000)])
    r_sep = gelman_rubin(separated)
    assert r_sep > 1.5

    # hand computation of the split formula
    m, n = separated.shape
    half = n // 2
    split = np.vstack([separated[:, :half], separated[:, half : 2 * half]])
    w = np.mean([np.var(c, ddof=1) for c in split])
    b = half * np.var(split.mean(axis=1), ddof=1)
    by_hand = np.sqrt(((half - 1) / half * w + b / half) / w)
    assert abs(r_sep - by_hand) < 1e-6
    report(8, f"iid R-hat {r_iid:.4f}; separated-means R-hat {r_sep:.3f} = hand value {by_hand:.3f}")


# ---------------------------------------------------------------------------
# 9. interval-censoring imputation


def test_criterion_09_imputation():
    rng = np.random.default_rng(909)
    truth = BmotParams(lambda_u=2.0, sigma_tilde_u=1.0, xi=-0.1, u=0.0)
    values = sample_tube_maximum(truth, rng, size=400)
    hw = np.where(values > 0.0, 0.05, 0.0)
    rounded = np.where(values > 0.0, np.floor(values / 0.1) * 0.1 + 0.05, values)
    data = Dataset(values=rounded, half_widths=hw, u=0.0)
    m = -np.log(data.n_minus / data.n)
    priors = PriorConfig(
        alpha_lambda=m * m, beta_lambda=m, alpha_sigma=0.25, beta_sigma=0.25
    )
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=1000, seed=9)
    res = run_chains(data, "censored", priors, cfg)
    idx = res.imputable_indices
    lo = data.values[idx] - data.half_widths[idx]
    hi = data.values[idx] + data.half_widths[idx]
    assert res.imputed is not None and res.imputed.shape[-1] == idx.size
    assert np.all(res.imputed >= lo) and np.all(res.imputed <= hi)
    assert np.all(res.imputed > 0.0)

    exact = Dataset(values=values, half_widths=np.zeros_like(values), u=0.0)
    with_impute = run_chains(exact, "censored", priors, cfg, impute=True)
    without = run_chains(exact, "censored", priors, cfg, impute=False)
    assert np.array_equal(with_impute.draws, without.draws)
    report(
        9,
        f"{idx.size} interval-censored observations imputed inside their intervals "
        "and above the threshold; exact-data chains identical with imputation on/off",
    )


# ---------------------------------------------------------------------------
# 10. end-to-end determinism of the CLI


def test_criterion_10_end_to_end_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.delenv("BMOT_SEED", raising=False)

    rng = np.random.default_rng(1010)
    p = BmotParams(lambda_u=2.0, sigma_tilde_u=0.5, xi=-0.1, u=1.0)
    values = sample_tube_maximum(p, rng, size=300)
    hw = np.where(values > 1.0, 0.05, 0.0)
    rec = np.where(values > 1.0, np.floor(values / 0.1) * 0.1 + 0.05, values)
    data = tmp_path / "data.csv"
    data.write_text(
        "wall_loss,rounding_halfwidth\n"
        + "".join(f"{v:.17g},{h:.17g}\n" for v, h in zip(rec, hw))
    )
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "n_chains": 2,
                "n_warmup": 600,
                "n_draws": 400,
                "mu_prior_mean": 1.5,
                "mu_prior_sd": 3.0,
                "alpha_sigma": 0.25,
                "beta_sigma": 0.5,
            }
        )
    )

    fit_out = tmp_path / "fit"
    fit_argv = [
        "fit", str(data), "--model", "censored", "--threshold", "1.0",
        "--seed", "11", "--config", str(cfg), "--out", str(fit_out), "--jobs", "1",
    ]
    assert main(fit_argv) == EXIT_OK
    first = {f.name: f.read_bytes() for f in fit_out.iterdir()}
    assert main(fit_argv) == EXIT_OK
    second = {f.name: f.read_bytes() for f in fit_out.iterdir()}
    assert first == second

    sim_out = tmp_path / "sim"
    study = tmp_path / "study.json"
    study.write_text(
        json.dumps({"scenarios": [{"xi_true": -0.1, "mu_gamma": 3.0, "replications": 2}]})
    )
    sim_argv = [
        "simulate", "--study", str(study), "--seed", "5",
        "--out", str(sim_out), "--jobs", "1",
    ]
    assert main(sim_argv) == EXIT_OK
    first = {f.name: f.read_bytes() for f in sim_out.iterdir()}
    assert main(sim_argv) == EXIT_OK
    second = {f.name: f.read_bytes() for f in sim_out.iterdir()}
    assert first == second
    report(10, "fit and simulate outputs byte-identical across reruns (fixed seed)")
