"""Simulation-study harness tests: mixture generation, protocol, aggregation."""
import numpy as np
import pytest
from scipy import stats

from bmot.sampler import SamplerConfig
from bmot.simstudy import (
    DESK_MU_GAMMA_GRID,
    DESK_XI_GRID,
    MU_GAMMA_GRID,
    XI_GRID,
    AggregateRow,
    ModelSummary,
    ReplicationResult,
    Scenario,
    aggregate,
    desk_grid,
    full_grid,
    generate_mixture,
    run_replication,
    run_study,
    write_study_csv,
)

TINY = SamplerConfig(n_chains=2, n_warmup=500, n_draws=300)


class TestGrids:
    def test_full_grid_is_1500_datasets(self):
        scenarios = full_grid()
        assert len(scenarios) == 15
        assert sum(s.replications for s in scenarios) == 1500

    def test_desk_grid(self):
        scenarios = desk_grid()
        assert len(scenarios) == 4
        assert sum(s.replications for s in scenarios) == 80

    def test_near_gumbel_shape_kept_literally(self):
        assert 0.001 in XI_GRID

    def test_scenario_validation(self):
        with pytest.raises(ValueError):
            Scenario(xi_true=0.1, mu_gamma=-1.0)
        with pytest.raises(ValueError):
            Scenario(xi_true=0.1, mu_gamma=3.0, p_g=0.0)


class TestGenerateMixture:
    def test_all_gev_when_pg_one(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, p_g=1.0)
        _, labels = generate_mixture(s, 0)
        assert np.all(labels == "gev")

    def test_component_count_matches_binomial_expectation(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0)
        counts = np.array(
            [np.sum(generate_mixture(s, seed)[1] == "gev") for seed in range(1000)]
        )
        se_mean = np.sqrt(200 * 0.6 * 0.4) / np.sqrt(1000)
        assert abs(counts.mean() - 120.0) < 3 * se_mean

    def test_component_counts_consistent_with_binomial(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0)
        counts = np.array(
            [np.sum(generate_mixture(s, seed)[1] == "gev") for seed in range(1000)]
        )
        # chi-square against Binomial(200, 0.6), merging tails to keep
        # expected cell counts above 5
        ks = np.arange(200 + 1)
        pmf = stats.binom.pmf(ks, 200, 0.6)
        lo = np.searchsorted(np.cumsum(pmf), 0.005)
        hi = np.searchsorted(np.cumsum(pmf), 0.995)
        edges = [-0.5, lo - 0.5, *np.arange(lo, hi) + 0.5, 200.5]
        observed, _ = np.histogram(counts, bins=edges)
        expected = 1000 * np.array(
            [
                pmf[: lo].sum(),
                *pmf[lo:hi],
                pmf[hi:].sum(),
            ]
        )
        keep = expected >= 5
        chi2 = np.sum((observed[keep] - expected[keep]) ** 2 / expected[keep])
        assert chi2 < stats.chi2.ppf(0.99, keep.sum() - 1)

    def test_gamma_component_moments(self):
        s = Scenario(xi_true=-0.1, mu_gamma=4.0)
        pooled = []
        for seed in range(50):
            values, labels = generate_mixture(s, seed)
            pooled.append(values[labels == "gamma"])
        pooled = np.concatenate(pooled)
        assert pooled.mean() == pytest.approx(4.0, rel=0.02)
        assert pooled.var() == pytest.approx(1.0, rel=0.05)

    def test_bit_reproducible(self):
        s = Scenario(xi_true=0.1, mu_gamma=5.0)
        a, la = generate_mixture(s, 123)
        b, lb = generate_mixture(s, 123)
        assert np.array_equal(a, b) and np.array_equal(la, lb)

    def test_different_seeds_differ(self):
        s = Scenario(xi_true=0.1, mu_gamma=5.0)
        a, _ = generate_mixture(s, 1)
        b, _ = generate_mixture(s, 2)
        assert not np.array_equal(a, b)


class TestRunReplication:
    def test_simulated_fit_uses_exactly_the_gev_subsample(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0)
        rep = run_replication(s, (7, 0, 0), cfg=TINY)
        _, labels = generate_mixture(s, np.random.SeedSequence((7, 0, 0)).spawn(3)[0])
        assert rep.n_gev == int(np.sum(labels == "gev"))
        assert set(rep.fits) == {"censored", "standard", "simulated"}
        for summary in rep.fits.values():
            assert set(summary.moments) == {"location", "scale", "shape", "return_level"}
            for mean, sd in summary.moments.values():
                assert np.isfinite(mean) and sd > 0.0

    def test_degenerate_all_gev_mixture_agrees_across_fits(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, p_g=1.0)
        rep = run_replication(s, (11, 0, 0), cfg=SamplerConfig(n_chains=2, n_warmup=800, n_draws=500))
        lo_c, hi_c = rep.fits["censored"].shape_hdi
        lo_s, hi_s = rep.fits["simulated"].shape_hdi
        assert max(lo_c, lo_s) < min(hi_c, hi_s)  # overlapping shape intervals


def fake_replication(scenario, replication, bias_by_model, sd_by_model, converged=True):
    base = {"location": 5.5, "scale": 1.0, "shape": -0.1, "return_level": 7.0}
    fits = {}
    for name in ("censored", "standard", "simulated"):
        offset = bias_by_model.get(name, 0.0)
        sd = sd_by_model.get(name, 1.0)
        fits[name] = ModelSummary(
            moments={k: (v + offset, sd) for k, v in base.items()},
            shape_hdi=(-0.2, 0.0),
            converged=converged if name != "simulated" else True,
            rhat_max=1.0,
        )
    return ReplicationResult(scenario=scenario, replication=replication, n_gev=120, fits=fits)


class TestAggregate:
    def test_identical_replications_zero_width_interval(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, replications=3)
        reps = [fake_replication(s, r, {"censored": 0.25}, {}) for r in range(3)]
        result = aggregate(reps)
        row = next(r for r in result.rows if r.model == "censored" and r.quantity == "shape")
        assert row.bias_mean == pytest.approx(0.25)
        assert row.bias_hdi == (pytest.approx(0.25), pytest.approx(0.25))
        assert row.sd_ratio_mean == pytest.approx(1.0)

    def test_symmetric_biases_average_to_zero(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, replications=3)
        reps = [
            fake_replication(s, r, {"standard": b}, {})
            for r, b in enumerate((-1.0, 0.0, 1.0))
        ]
        result = aggregate(reps)
        row = next(r for r in result.rows if r.model == "standard" and r.quantity == "shape")
        assert row.bias_mean == pytest.approx(0.0, abs=1e-14)

    def test_unconverged_replications_excluded_and_counted(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, replications=4)
        reps = [fake_replication(s, r, {}, {}) for r in range(3)]
        reps.append(fake_replication(s, 3, {"censored": 99.0}, {}, converged=False))
        result = aggregate(reps)
        assert result.n_excluded == 1
        assert result.excluded_replications == (3,)
        row = next(r for r in result.rows if r.model == "censored" and r.quantity == "shape")
        assert row.bias_mean == pytest.approx(0.0, abs=1e-14)
        assert row.n_used == 3 and row.n_excluded == 1

    def test_sd_ratio(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, replications=2)
        reps = [
            fake_replication(s, r, {}, {"standard": 0.5, "simulated": 1.0})
            for r in range(2)
        ]
        result = aggregate(reps)
        row = next(r for r in result.rows if r.model == "standard" and r.quantity == "scale")
        assert row.sd_ratio_mean == pytest.approx(0.5)

    def test_too_few_converged_raises(self):
        s = Scenario(xi_true=-0.1, mu_gamma=3.0, replications=2)
        reps = [fake_replication(s, r, {}, {}, converged=False) for r in range(2)]
        with pytest.raises(ValueError, match="converged"):
            aggregate(reps)


class TestRunStudy:
    # fits must converge for the aggregate to accept them, so these use a
    # budget slightly above the flagging noise floor
    STUDY_CFG = SamplerConfig(n_chains=4, n_warmup=800, n_draws=600)

    def test_deterministic_and_scheduler_independent(self):
        scenarios = [Scenario(xi_true=-0.1, mu_gamma=3.0, replications=2)]
        a = run_study(scenarios, seed=5, cfg=self.STUDY_CFG, jobs=1)
        b = run_study(scenarios, seed=5, cfg=self.STUDY_CFG, jobs=2)
        assert a[0].rows == b[0].rows

    def test_csv_schema(self, tmp_path):
        scenarios = [Scenario(xi_true=-0.1, mu_gamma=3.0, replications=2)]
        results = run_study(scenarios, seed=5, cfg=self.STUDY_CFG)
        path = tmp_path / "study.csv"
        write_study_csv(results, path)
        lines = path.read_text().splitlines()
        assert lines[0] == (
            "xi_true,mu_gamma,model,quantity,bias_mean,bias_hdi_lo,bias_hdi_hi,"
            "sd_ratio_mean,sd_ratio_hdi_lo,sd_ratio_hdi_hi,n_used,n_excluded"
        )
        assert len(lines) == 1 + 2 * 4  # two models x four quantities
