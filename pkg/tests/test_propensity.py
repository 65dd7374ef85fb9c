import numpy as np
import pytest
from scipy.optimize import bisect

from pseudoweight import (FitConfig, fit_pseudo_mle, matching_scores,
                          participation_rates, scale_weights)
from pseudoweight.propensity import CollinearityError, _loglik, _score

from conftest import intercept_only, make_cohort, make_matrix, make_survey


def intercept_problem(n_c, d, rng=None, mode="weighted"):
    y = None if rng is None else rng.normal(size=n_c)
    cohort = make_cohort(intercept_only(n_c), y=y)
    survey = make_survey(intercept_only(len(d)), d=d)
    return cohort, survey, fit_pseudo_mle(cohort, survey, FitConfig(mode))


class TestScaleWeights:
    def test_basic(self):
        d_star, a = scale_weights(np.array([2.0, 3.0, 5.0]))
        assert a == pytest.approx(0.3)
        np.testing.assert_allclose(d_star, [0.6, 0.9, 1.5])

    def test_identity(self):
        d_star, a = scale_weights(np.ones(4))
        assert a == 1.0
        np.testing.assert_array_equal(d_star, np.ones(4))

    def test_sum_is_sample_size(self):
        d_star, a = scale_weights(np.array([10.0, 90.0]))
        assert a == pytest.approx(0.02)
        np.testing.assert_allclose(d_star, [0.2, 1.8])
        assert d_star.sum() == pytest.approx(2.0, rel=1e-10)

    def test_guards(self):
        with pytest.raises(ValueError):
            scale_weights(np.array([]))
        with pytest.raises(ValueError):
            scale_weights(np.array([1.0, -2.0]))


class TestInterceptOnlyFit:
    def test_weighted_closed_form(self):
        _, _, fit = intercept_problem(100, np.full(300, 3.0))
        assert fit.converged
        assert fit.beta[0] == pytest.approx(np.log(100 / 900), abs=1e-10)

    def test_weighted_against_bisection_oracle(self, rng):
        # root of n_c (1 - p) - sum(d) p = 0 in the intercept, by bisection
        n_c = 173
        d = rng.uniform(1, 50, size=211)

        def score_b0(b0):
            p = 1 / (1 + np.exp(-b0))
            return n_c * (1 - p) - d.sum() * p

        oracle = bisect(score_b0, -20, 5, xtol=1e-13)
        _, _, fit = intercept_problem(n_c, d)
        assert fit.beta[0] == pytest.approx(oracle, abs=1e-8)

    def test_scaled_closed_form(self, rng):
        d = rng.uniform(1, 100, size=300)
        _, _, fit = intercept_problem(100, d, mode="scaled")
        assert fit.beta[0] == pytest.approx(np.log(100 / 300), abs=1e-10)
        assert fit.scale_a == pytest.approx(300 / d.sum())


def test_balanced_binary_covariate_gives_zero_slope():
    # identical weighted share of ones on both sides: slope must vanish
    x_c = np.repeat([1.0, 0.0], [10, 30])
    x_s = np.repeat([1.0, 0.0], [5, 15])
    cohort = make_cohort(make_matrix(x_c), y=None)
    survey = make_survey(make_matrix(x_s), d=np.full(20, 2.0))
    fit = fit_pseudo_mle(cohort, survey)
    assert fit.converged
    assert fit.beta[0] == pytest.approx(np.log(40 / 40), abs=1e-8)
    assert abs(fit.beta[1]) < 1e-8


def test_score_residual_at_solution(rng):
    X_c = make_matrix(rng.normal(size=80), rng.normal(size=80))
    X_s = make_matrix(rng.normal(1, 1, 120), rng.normal(size=120))
    cohort = make_cohort(X_c)
    survey = make_survey(X_s, d=rng.uniform(1, 200, 120))
    cfg = FitConfig("weighted")
    fit = fit_pseudo_mle(cohort, survey, cfg)
    assert fit.converged
    s = _score(X_c.values, X_s.values, survey.d, fit.beta, cfg.p_clip)
    assert np.max(np.abs(s)) / cohort.n <= cfg.score_tolerance


def test_fit_invariant_p_equals_expit_q(rng):
    cohort = make_cohort(make_matrix(rng.normal(size=50)))
    survey = make_survey(make_matrix(rng.normal(size=60)), d=rng.uniform(1, 10, 60))
    fit = fit_pseudo_mle(cohort, survey)
    np.testing.assert_allclose(fit.p_cohort, 1 / (1 + np.exp(-fit.q_cohort)), atol=1e-12)
    np.testing.assert_allclose(fit.p_survey, 1 / (1 + np.exp(-fit.q_survey)), atol=1e-12)


def test_analytic_score_matches_finite_differences(rng):
    X_c = make_matrix(rng.normal(size=40), rng.normal(size=40)).values
    X_s = make_matrix(rng.normal(size=60), rng.normal(size=60)).values
    omega = rng.uniform(1, 30, 60)
    eps = 1e-8
    for _ in range(5):
        beta = rng.normal(scale=0.5, size=3)
        s = _score(X_c, X_s, omega, beta, 1e-8)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            fd = (_loglik(X_c, X_s, omega, beta + e, eps)
                  - _loglik(X_c, X_s, omega, beta - e, eps)) / 2e-6
            assert fd == pytest.approx(s[j], rel=1e-6, abs=1e-8)


class TestParticipationRates:
    def test_intercept_only_unscaled(self):
        cohort, _, fit = intercept_problem(100, np.full(300, 3.0))
        pi = participation_rates(fit, cohort.X)
        np.testing.assert_allclose(pi, 1 / 9, atol=1e-10)

    def test_scaling_cancels(self):
        d = np.full(300, 3.0)
        cohort, _, fit_w = intercept_problem(100, d)
        _, _, fit_s = intercept_problem(100, d, mode="scaled")
        np.testing.assert_allclose(participation_rates(fit_s, cohort.X),
                                   participation_rates(fit_w, cohort.X), atol=1e-10)

    def test_zero_beta_caps_at_one(self):
        from pseudoweight import PropensityFit
        fit = PropensityFit(beta=np.zeros(1), scale_a=1.0, weighted=True,
                            p_cohort=np.full(3, 0.5), p_survey=np.full(2, 0.5),
                            q_cohort=np.zeros(3), q_survey=np.zeros(2),
                            converged=True, iterations=0)
        np.testing.assert_array_equal(participation_rates(fit, intercept_only(3)), 1.0)

    def test_requires_weighted_fit(self):
        cohort, _, fit = intercept_problem(100, np.full(300, 3.0), mode="unweighted")
        with pytest.raises(ValueError, match="weighted"):
            participation_rates(fit, cohort.X)


def test_scaled_and_unscaled_rates_agree_on_large_samples():
    # the intercept-offset correction is asymptotic for non-trivial models
    rng = np.random.default_rng(5)
    n = 10_000
    x_c = rng.normal(0.5, 1, n)
    x_s = rng.normal(0, 1, n)
    cohort = make_cohort(make_matrix(x_c))
    survey = make_survey(make_matrix(x_s), d=rng.uniform(5, 50, n))
    fit_w = fit_pseudo_mle(cohort, survey, FitConfig("weighted"))
    fit_s = fit_pseudo_mle(cohort, survey, FitConfig("scaled"))
    pi_w = participation_rates(fit_w, cohort.X)
    pi_s = participation_rates(fit_s, cohort.X)
    assert np.mean(np.abs(pi_s - pi_w) / pi_w) < 0.02


class TestMatchingScores:
    def test_zero_beta(self):
        from pseudoweight import PropensityFit
        fit = PropensityFit(beta=np.zeros(1), scale_a=1.0, weighted=False,
                            p_cohort=np.full(3, 0.5), p_survey=np.full(2, 0.5),
                            q_cohort=np.zeros(3), q_survey=np.zeros(2),
                            converged=True, iterations=0)
        qc, qs = matching_scores(fit)
        assert not qc.any() and not qs.any()

    def test_intercept_only_constant(self):
        _, _, fit = intercept_problem(100, np.full(300, 3.0))
        qc, qs = matching_scores(fit)
        np.testing.assert_allclose(qc, np.log(1 / 9), atol=1e-10)
        np.testing.assert_allclose(qs, np.log(1 / 9), atol=1e-10)

    def test_intercept_shift_is_additive(self, rng):
        cohort = make_cohort(make_matrix(rng.normal(size=30)))
        survey = make_survey(make_matrix(rng.normal(size=40)), d=np.ones(40))
        fit = fit_pseudo_mle(cohort, survey)
        shifted = fit.beta.copy()
        shifted[0] += 2.5
        np.testing.assert_allclose(cohort.X.values @ shifted, fit.q_cohort + 2.5,
                                   atol=1e-12)


def test_collinear_columns_named(rng):
    x = rng.normal(size=30)
    X_c = make_matrix(x, 2 * x, names=["x1", "x1_double"])
    x2 = rng.normal(size=40)
    X_s = make_matrix(x2, 2 * x2, names=["x1", "x1_double"])
    with pytest.raises(CollinearityError) as err:
        fit_pseudo_mle(make_cohort(X_c), make_survey(X_s, d=np.ones(40)))
    assert "x1_double" in err.value.columns


def test_nonconvergence_is_flagged_not_raised(rng):
    cohort = make_cohort(make_matrix(rng.normal(size=200)))
    survey = make_survey(make_matrix(rng.normal(2, 1, 200)), d=rng.uniform(1, 500, 200))
    fit = fit_pseudo_mle(cohort, survey, FitConfig(max_iterations=1))
    assert not fit.converged
    assert any("convergence" in w for w in fit.warnings)


def test_fit_config_guards():
    with pytest.raises(ValueError):
        FitConfig(survey_weight_mode="bogus")
    with pytest.raises(ValueError):
        FitConfig(max_iterations=0)
