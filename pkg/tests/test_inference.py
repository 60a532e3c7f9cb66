"""Regression machinery: OLS, robust errors, stacked GLS, spec builders."""

import numpy as np
import pytest

from megaclock.aggregation import ClockPanel, sample_covariance, weighted_index_weights, mega_wgt
from megaclock.inference import (
    DEFAULT_CONTROLS,
    HEALTH_COLUMNS,
    InferenceError,
    LinearModelSpec,
    age_acceleration,
    build_exposure_spec,
    build_outcome_spec,
    constrained_sur_gls,
    ols,
)


def random_design(rng, n, p, intercept=True):
    X = rng.standard_normal((n, p))
    if intercept:
        X = np.column_stack([np.ones(n), X])
    return X


class TestOls:
    def test_perfect_fit(self):
        x = np.linspace(-2, 5, 40)
        y = 2.0 * x
        fit = ols(y, np.column_stack([np.ones(40), x]), names=["intercept", "x"])
        assert fit.coefficient("x") == pytest.approx(2.0, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0)
        assert np.max(np.abs(fit.residuals)) < 1e-10

    def test_constant_outcome_r2_zero_with_warning(self):
        x = np.linspace(0, 1, 30)
        with pytest.warns(UserWarning, match="constant"):
            fit = ols(np.full(30, 3.0), np.column_stack([np.ones(30), x]))
        assert fit.r_squared == 0.0
        assert abs(fit.coefficients[1]) < 1e-12

    def test_hc1_matches_brute_force_sandwich(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, p = 120, 4
            X = random_design(rng, n, p - 1)
            y = X @ rng.normal(size=p) + rng.standard_normal(n) * (
                1.0 + np.abs(X[:, 1]))
            fit = ols(y, X, se_type="hc1")
            e = y - X @ fit.coefficients
            xtx_inv = np.linalg.inv(X.T @ X)
            brute = xtx_inv @ (X.T * e**2) @ X @ xtx_inv * (n / (n - p))
            assert np.max(np.abs(fit.covariance - brute)) < 1e-10

    def test_hc1_equals_classical_on_zero_residual_design(self):
        x = np.linspace(1, 4, 25)
        y = 1.0 + 0.5 * x
        X = np.column_stack([np.ones(25), x])
        classical = ols(y, X, se_type="classical")
        robust = ols(y, X, se_type="hc1")
        assert np.max(np.abs(classical.covariance - robust.covariance)) < 1e-10

    def test_rank_deficiency_names_column(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(30)
        X = np.column_stack([np.ones(30), x, 2 * x])
        with pytest.raises(InferenceError, match="rank deficient"):
            ols(rng.standard_normal(30), X, names=["intercept", "a", "a_twice"])

    def test_residual_orthogonality_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(20, 80))
            p = int(rng.integers(1, 5))
            X = random_design(rng, n, p)
            X[:, 1:] = (X[:, 1:] - X[:, 1:].mean(0)) / X[:, 1:].std(0)
            y = rng.standard_normal(n)
            fit = ols(y, X)
            assert np.max(np.abs(X.T @ fit.residuals)) / n < 1e-8
            assert fit.adj_r_squared <= fit.r_squared + 1e-12

    def test_outcome_scaling_equivariance(self):
        rng = np.random.default_rng(3)
        X = random_design(rng, 60, 2)
        y = X @ np.array([1.0, 0.4, -0.2]) + rng.standard_normal(60)
        base = ols(y, X)
        scaled = ols(3.0 * y, X)
        assert np.allclose(scaled.coefficients, 3.0 * base.coefficients, atol=1e-10)
        assert np.allclose(scaled.standard_errors, 3.0 * base.standard_errors, atol=1e-10)
        assert np.allclose(scaled.t_statistics, base.t_statistics, atol=1e-10)

    def test_spec_validation(self):
        with pytest.raises(InferenceError, match="distinct"):
            LinearModelSpec(outcome="y", regressors=["a", "a"])
        with pytest.raises(InferenceError, match="outcome"):
            LinearModelSpec(outcome="y", regressors=["y"])
        with pytest.raises(InferenceError, match="se_type"):
            LinearModelSpec(outcome="y", regressors=["a"], se_type="hc9")


class TestAgeAcceleration:
    def test_score_equal_age_gives_zero_residuals(self):
        age = np.linspace(14, 18, 50)
        assert np.max(np.abs(age_acceleration(age, age))) < 1e-10

    def test_intercept_absorbs_shift(self):
        age = np.linspace(14, 18, 50)
        assert np.max(np.abs(age_acceleration(age + 1.0, age))) < 1e-10

    def test_orthogonal_to_age(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            age = rng.uniform(14, 18, 80)
            score = age + rng.standard_normal(80)
            resid = age_acceleration(score, age)
            assert abs(resid.mean()) < 1e-12
            assert abs(resid @ age) / 80 < 1e-10

    def test_constant_age_errors(self):
        with pytest.raises(InferenceError, match="constant"):
            age_acceleration(np.arange(10.0), np.full(10, 15.0))


def make_panel(rng, n, k):
    lam = rng.uniform(0.6, 1.2, size=k)
    latent = rng.standard_normal(n) * 2.0
    readings = 15.0 + latent[:, None] * lam + rng.standard_normal((n, k))
    return ClockPanel(clock_names=[f"clock_{i + 1}" for i in range(k)],
                      readings=readings, age_years=np.full(n, 15.0))


class TestConstrainedSurGls:
    def test_single_clock_reduces_exactly_to_ols(self):
        rng = np.random.default_rng(5)
        n = 80
        x = rng.standard_normal(n)
        X = np.column_stack([np.ones(n), x])
        c = 1.0 + 0.5 * x + rng.standard_normal(n)
        gls = constrained_sur_gls(c, X, names=["intercept", "x"])
        single = ols(c, X, names=["intercept", "x"])
        assert np.allclose(gls.coefficients, single.coefficients, atol=1e-12)

    def test_identity_weighting_equals_ols_on_plain_average(self):
        rng = np.random.default_rng(6)
        n, k, p = 100, 3, 2
        X = random_design(rng, n, p)
        # whiten the readings so their sample covariance is exactly identity
        raw = rng.standard_normal((n, k))
        raw -= raw.mean(axis=0)
        chol = np.linalg.cholesky(np.cov(raw, rowvar=False, ddof=1))
        white = raw @ np.linalg.inv(chol).T
        panel = ClockPanel(clock_names=list("abc"), readings=white,
                           age_years=np.full(n, 15.0))
        gls = constrained_sur_gls(panel, X)
        avg = ols(white.mean(axis=1), X)
        assert np.allclose(gls.coefficients, avg.coefficients, atol=1e-8)

    def test_gls_identity_with_weighted_index(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(40, 120))
            k = int(rng.integers(2, 5))
            p = int(rng.integers(1, 4))
            panel = make_panel(rng, n, k)
            X = random_design(rng, n, p)
            gls = constrained_sur_gls(panel, X)
            cov = sample_covariance(panel)
            scores = mega_wgt(panel, weighted_index_weights(cov))
            direct = ols(scores, X)
            scale = np.maximum(np.abs(direct.coefficients), 1.0)
            assert np.max(np.abs(gls.coefficients - direct.coefficients) / scale) < 1e-8

    def test_residual_cov_source_runs(self):
        rng = np.random.default_rng(8)
        panel = make_panel(rng, 90, 3)
        X = random_design(rng, 90, 2)
        fit = constrained_sur_gls(panel, X, cov_source="residuals")
        assert fit.tag == "sur_gls[residuals]"
        with pytest.raises(InferenceError, match="cov_source"):
            constrained_sur_gls(panel, X, cov_source="other")


class TestSpecBuilders:
    def test_outcome_spec_regressor_count(self):
        spec = build_outcome_spec("mega_wgt", "gcse_score")
        assert len(spec.regressors) == 1 + len(HEALTH_COLUMNS) + len(DEFAULT_CONTROLS)
        assert spec.regressors[0] == "mega_wgt"

    def test_outcome_spec_without_health_block(self):
        spec = build_outcome_spec("mega_wgt", "gcse_score", include_health=False)
        assert not set(HEALTH_COLUMNS) & set(spec.regressors)

    def test_exposure_spec_orders_periods(self):
        spec = build_exposure_spec("mega_wgt", "abuse_0_10", "abuse_11_18")
        assert spec.regressors[:2] == ["abuse_11_18", "abuse_0_10"]
        assert spec.outcome == "mega_wgt"

    def test_exposure_spec_rejects_identical_periods(self):
        with pytest.raises(InferenceError, match="distinct"):
            build_exposure_spec("mega_wgt", "abuse", "abuse")

    def test_disaggregated_needs_four_columns(self):
        with pytest.raises(InferenceError, match="four"):
            build_exposure_spec("mega_wgt", "a", "b", disaggregated=["x", "y"])
