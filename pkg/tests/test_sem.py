"""Latent measurement model: identification, recovery, rescaling, scores."""

import numpy as np
import pandas as pd
import pytest

from megaclock.cohort import CohortTable
from megaclock.sem import (
    OUTCOME_ON_LATENT,
    SemError,
    build_mimic,
    fit_sem,
    latent_scores,
    parse_model_file,
    rescale_reference,
)
from megaclock.simulate import SimConfig, simulate_clock_panel

CLOCKS4 = ["clock_1", "clock_2", "clock_3", "clock_4"]


def panel_table(seed=0, n=5000, loadings=(1, 0.8, 1.2, 0.9),
                error_sds=(1.0, 1.0, 1.0, 1.0), omega_sd=1.0,
                covariate_effects=None):
    config = SimConfig(seed=seed, n=n, loadings=loadings, error_sds=error_sds,
                       age_slope=0.0, age_sd=0.0, omega_sd=omega_sd,
                       covariate_effects=covariate_effects or {})
    return simulate_clock_panel(config)


class TestBuildModel:
    def test_parameter_counts_four_clocks_ten_covariates(self):
        model = build_mimic([("ea", CLOCKS4, "clock_1")],
                            [f"x{i}" for i in range(10)])
        summary = model.parameter_summary()
        assert summary["free_loadings"] == 3
        assert summary["gamma"] == 10
        assert summary["indicator_variances"] == 4
        assert summary["latent_variances"] == 1
        assert model.degrees_of_freedom >= 0

    def test_single_indicator_under_identified(self):
        with pytest.raises(SemError, match="under-identified"):
            build_mimic([("ea", ["clock_1"], "clock_1")], ["x1"])

    def test_two_indicators_no_covariates_under_identified(self):
        with pytest.raises(SemError, match="under-identified"):
            build_mimic([("ea", ["clock_1", "clock_2"], "clock_1")], [])

    def test_three_block_model_builds(self):
        model = build_mimic(
            [
                ("ea", CLOCKS4, "clock_1"),
                ("cog", [f"cog_{i}" for i in range(4)], "cog_0"),
                ("soc", [f"soc_{i}" for i in range(5)], "soc_0"),
            ],
            ["x1", "x2"],
        )
        assert len(model.blocks) == 3
        assert model.n_indicators == 13

    def test_reference_must_be_indicator(self):
        with pytest.raises(SemError, match="reference"):
            build_mimic([("ea", CLOCKS4, "clock_9")], ["x1"])

    def test_duplicate_indicator_across_blocks(self):
        with pytest.raises(SemError, match="two latents"):
            build_mimic([("a", ["c1", "c2", "c3"], "c1"),
                         ("b", ["c3", "c4", "c5"], "c3")], ["x1"])

    def test_outcome_config_validation(self):
        with pytest.raises(SemError, match="outcome"):
            build_mimic([("ea", CLOCKS4, "clock_1")], [], config=OUTCOME_ON_LATENT)

    def test_parse_model_file(self):
        model = parse_model_file(
            """
            # four clocks, one latent
            latent ea: clock_1 clock_2 clock_3 clock_4 ref=clock_1
            covariates: x1 x2
            """
        )
        assert model.blocks[0].reference == "clock_1"
        assert model.covariates == ["x1", "x2"]
        with pytest.raises(SemError, match="exactly one ref"):
            parse_model_file("latent ea: a b c\n")


class TestFit:
    def test_near_noiseless_recovery(self):
        # With collinear noiseless indicators the likelihood diverges along
        # several parameter manifolds, so the estimator is only well posed
        # with a strictly positive error variance; a tiny one pins the
        # parameters to sampling accuracy.
        config = SimConfig(seed=5, n=2000, loadings=(1, 1, 1, 1),
                           error_sds=(0.05, 0.05, 0.05, 0.05), age_slope=0.0,
                           age_sd=0.0, omega_sd=1.0, covariate_effects={"x1": 0.5})
        table = simulate_clock_panel(config)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=0)
        assert fit.converged
        assert fit.gradient_norm < 1e-6
        for name in CLOCKS4[1:]:
            assert fit.loading(name) == pytest.approx(1.0, abs=0.01)
        assert fit["gamma:ea:x1"] == pytest.approx(0.5, abs=0.01)
        assert fit["latent_var:ea"] == pytest.approx(1.0, abs=0.08)

    def test_zero_noise_flags_heywood(self):
        config = SimConfig(seed=5, n=2000, loadings=(1, 1, 1, 1),
                           error_sds=(0, 0, 0, 0), age_slope=0.0, age_sd=0.0,
                           omega_sd=1.0, covariate_effects={"x1": 0.5})
        table = simulate_clock_panel(config)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        with pytest.warns(UserWarning, match="Heywood"):
            fit = fit_sem(model, table, seed=0)
        assert fit.heywood
        for name in CLOCKS4[1:]:
            assert fit.loading(name) == pytest.approx(1.0, abs=1e-3)

    def test_recovery_within_three_ses(self):
        table = panel_table(seed=11, n=20000, omega_sd=1.0,
                           covariate_effects={"x1": 0.5, "x2": -0.3})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1", "x2"])
        fit = fit_sem(model, table, seed=1)
        assert fit.converged
        truth = {"loading:clock_2": 0.8, "loading:clock_3": 1.2,
                 "loading:clock_4": 0.9, "gamma:ea:x1": 0.5, "gamma:ea:x2": -0.3,
                 "latent_var:ea": 1.0}
        for name in CLOCKS4:
            truth[f"resid_var:{name}"] = 1.0
        for name, value in truth.items():
            assert abs(fit[name] - value) <= 3.0 * fit.se(name), name

    def test_gradient_matches_finite_differences_at_optimum(self):
        table = panel_table(seed=12, n=4000, covariate_effects={"x1": 0.5})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=2)
        problem = fit._problem
        x = fit.parameters
        _, grad = problem.value_and_grad(x)
        for i in range(len(x)):
            h = 1e-6 * max(abs(x[i]), 1.0)
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (problem.value_and_grad(xp)[0] - problem.value_and_grad(xm)[0]) / (2 * h)
            denom = max(abs(fd), 1.0)
            assert abs(grad[i] - fd) / denom < 1e-5

    def test_reduced_form_coefficients_are_loading_times_gamma(self):
        table = panel_table(seed=13, n=3000, covariate_effects={"x1": 0.4, "x2": 0.2})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1", "x2"])
        fit = fit_sem(model, table, seed=3)
        problem = fit._problem
        T, _ = problem._structure(fit.parameters)
        Lam, nu, Gam, psi, theta = problem.unpack(fit.parameters)
        implied = -T[:, problem.K: problem.K + problem.P]
        assert np.max(np.abs(implied - Lam @ Gam)) < 1e-8

    def test_needs_more_rows_than_parameters(self):
        table = panel_table(seed=14, n=5000, covariate_effects={"x1": 0.5})
        small = CohortTable(table.data.iloc[:12].reset_index(drop=True),
                            dict(table.types), hidden_columns=table.hidden_columns)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        with pytest.raises(SemError, match="more observations"):
            fit_sem(model, small, seed=0)

    def test_missing_values_rejected(self):
        table = panel_table(seed=15, n=200, covariate_effects={"x1": 0.5})
        data = table.data.copy()
        data.loc[0, "clock_2"] = np.nan
        bad = CohortTable(data, dict(table.types), hidden_columns=table.hidden_columns)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        with pytest.raises(SemError, match="missing"):
            fit_sem(model, bad, seed=0)

    def test_deterministic_given_seed(self):
        table = panel_table(seed=16, n=1000, covariate_effects={"x1": 0.5})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit_a = fit_sem(model, table, seed=9)
        fit_b = fit_sem(model, table, seed=9)
        assert np.array_equal(fit_a.parameters, fit_b.parameters)

    def test_robust_se_variant(self):
        table = panel_table(seed=17, n=2000, covariate_effects={"x1": 0.5})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=0, se_type="robust")
        observed = fit_sem(model, table, seed=0)
        ratio = fit.standard_errors / observed.standard_errors
        assert np.all(ratio > 0.5) and np.all(ratio < 2.0)


class TestOutcomeOnLatent:
    def build(self, seed=21, n=6000, delta=0.3):
        table = panel_table(seed=seed, n=n, omega_sd=2.0)
        rng = np.random.default_rng(seed + 1000)
        h = rng.standard_normal(n)
        latent = table.data["true_latent"].to_numpy()
        y = 1.0 + delta * latent + 0.7 * h + rng.normal(0, 1.0, n)
        table = table.with_column("y", y).with_column("h", h)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], [],
                            config=OUTCOME_ON_LATENT, outcome="y",
                            outcome_controls=["h"])
        return table, model

    def test_recovery(self):
        table, model = self.build()
        fit = fit_sem(model, table, seed=0)
        assert fit.converged
        assert abs(fit["delta"] - 0.3) <= 3.0 * fit.se("delta") + 0.02
        assert abs(fit["outcome_beta:h"] - 0.7) <= 3.0 * fit.se("outcome_beta:h") + 0.02

    def test_linear_prediction_mode_rejected(self):
        table, model = self.build(seed=22, n=1500)
        fit = fit_sem(model, table, seed=0)
        with pytest.raises(SemError, match="latent-on-covariates"):
            latent_scores(fit, mode="linear-prediction")


class TestScores:
    def test_zero_gamma_linear_prediction_is_intercept(self):
        table = panel_table(seed=31, n=1500)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], [])
        fit = fit_sem(model, table, seed=0)
        scores = latent_scores(fit, mode="linear-prediction")
        assert np.allclose(scores, fit.intercept("clock_1"), atol=1e-10)

    def test_near_noiseless_regression_score_recovers_latent(self):
        config = SimConfig(seed=32, n=1000, loadings=(1, 1, 1, 1),
                           error_sds=(0.05, 0.05, 0.05, 0.05), age_slope=0.0,
                           age_sd=0.0, omega_sd=1.0, covariate_effects={"x1": 0.5})
        table = simulate_clock_panel(config)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=0)
        scores = latent_scores(fit, mode="regression-score")
        truth = table.data["true_latent"].to_numpy()
        assert np.max(np.abs(scores - truth)) < 0.12
        assert np.sqrt(np.mean((scores - truth) ** 2)) < 0.035

    def test_score_beats_any_single_clock(self):
        table = panel_table(seed=33, n=20000, omega_sd=1.0,
                           covariate_effects={"x1": 0.5, "x2": -0.3})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1", "x2"])
        fit = fit_sem(model, table, seed=0)
        truth = table.data["true_latent"].to_numpy()
        score_corr = np.corrcoef(latent_scores(fit), truth)[0, 1]
        for name in CLOCKS4:
            clock_corr = np.corrcoef(table.data[name], truth)[0, 1]
            assert score_corr > clock_corr

    def test_unknown_mode_errors(self):
        table = panel_table(seed=34, n=800)
        model = build_mimic([("ea", CLOCKS4, "clock_1")], [])
        fit = fit_sem(model, table, seed=0)
        with pytest.raises(SemError, match="scoring mode"):
            latent_scores(fit, mode="bayes")


class TestRescaleReference:
    def fit4(self, seed=41, n=4000):
        table = panel_table(seed=seed, n=n, covariate_effects={"x1": 0.5})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        return fit_sem(model, table, seed=0)

    def test_rescale_to_current_reference_is_identity(self):
        fit = self.fit4()
        same = rescale_reference(fit, "clock_1")
        assert np.allclose(same.parameters, fit.parameters, atol=1e-12)
        assert same.log_likelihood == fit.log_likelihood

    def test_two_indicator_hand_algebra(self):
        # lambda=(1, 2): rescaling to clock 2 halves loadings and gamma,
        # quarters the latent variance, keeps the likelihood
        config = SimConfig(seed=42, n=8000, loadings=(1.0, 2.0),
                           error_sds=(0.8, 0.8), age_slope=0.0, age_sd=0.0,
                           omega_sd=1.0, covariate_effects={"x1": 0.5})
        table = simulate_clock_panel(config)
        model = build_mimic([("ea", ["clock_1", "clock_2"], "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=0)
        lam2 = fit.loading("clock_2")
        re = rescale_reference(fit, "clock_2")
        assert re.loading("clock_2") == 1.0
        assert re.loading("clock_1") == pytest.approx(1.0 / lam2, rel=1e-10)
        assert re["gamma:ea:x1"] == pytest.approx(fit["gamma:ea:x1"] * lam2, rel=1e-10)
        assert re["latent_var:ea"] == pytest.approx(fit["latent_var:ea"] * lam2**2,
                                                    rel=1e-10)
        assert re.log_likelihood == pytest.approx(fit.log_likelihood, abs=1e-10)

    def test_likelihood_invariance_across_all_references(self):
        fit = self.fit4(seed=43)
        for ref in CLOCKS4[1:]:
            re = rescale_reference(fit, ref)
            assert abs(re.log_likelihood - fit.log_likelihood) < 1e-10

    def test_score_spread_scales_with_reference_loading(self):
        """Scaling to a low-loading reference compresses the scores."""
        table = panel_table(seed=44, n=6000, loadings=(1, 0.5, 1.5, 0.9),
                            covariate_effects={"x1": 0.5})
        model = build_mimic([("ea", CLOCKS4, "clock_1")], ["x1"])
        fit = fit_sem(model, table, seed=0)
        spread_high = np.std(latent_scores(rescale_reference(fit, "clock_3")))
        spread_low = np.std(latent_scores(rescale_reference(fit, "clock_2")))
        assert spread_high > spread_low

    def test_zero_loading_rejected(self):
        fit = self.fit4(seed=45)
        fit.parameters[fit.parameter_names.index("loading:clock_2")] = 0.0
        with pytest.raises(SemError, match="zero"):
            rescale_reference(fit, "clock_2")
