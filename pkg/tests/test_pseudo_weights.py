import numpy as np
import pytest

from pseudoweight import (FitConfig, KernelSpec, compute_pseudoweights, ipsw_weights,
                          kernel_eval, kw_jacobian, kw_weights, silverman_bandwidth)
from pseudoweight.kernels import kw_weight_sums

from conftest import intercept_only, make_cohort, make_matrix, make_survey


class TestKernelEval:
    def test_values_at_zero(self):
        assert kernel_eval(0.0, "triangular") == 1.0
        assert kernel_eval(0.0, "epanechnikov") == 0.75
        assert kernel_eval(0.0, "gaussian") == pytest.approx(0.3989422804014327)

    def test_compact_support_edges(self):
        assert kernel_eval(1.0, "triangular") == 0.0
        assert kernel_eval(1.0, "epanechnikov") == 0.0
        assert kernel_eval(1.5, "triangular") == 0.0
        assert kernel_eval(0.5, "epanechnikov") == pytest.approx(0.75 * 0.75)
        assert kernel_eval(0.5, "triangular") == pytest.approx(0.5)

    def test_symmetry(self, rng):
        u = rng.normal(size=50)
        for kind in ("triangular", "epanechnikov", "gaussian"):
            np.testing.assert_allclose(kernel_eval(u, kind), kernel_eval(-u, kind))

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            kernel_eval(np.array([0.0, np.nan]), "triangular")

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown kernel"):
            kernel_eval(0.0, "uniform")


class TestSilvermanBandwidth:
    def test_hand_computed(self):
        q = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        sd = q.std(ddof=1)
        iqr = (np.percentile(q, 75) - np.percentile(q, 25)) / 1.34
        expected = 0.9 * min(sd, iqr) * 5 ** (-0.2)
        assert silverman_bandwidth(q) == pytest.approx(expected, rel=1e-12)

    def test_scale_equivariance(self, rng):
        q = rng.normal(size=400)
        assert silverman_bandwidth(3.0 * q) == pytest.approx(3.0 * silverman_bandwidth(q),
                                                             rel=1e-10)

    def test_iqr_degenerate_falls_back_to_sd(self):
        # middle half constant, tails spread: IQR = 0, sd > 0
        q = np.array([-10.0] + [0.0] * 8 + [10.0])
        sd = q.std(ddof=1)
        assert silverman_bandwidth(q) == pytest.approx(0.9 * sd * 10 ** (-0.2))

    def test_zero_spread_is_error(self):
        with pytest.raises(ValueError, match="degenerate"):
            silverman_bandwidth(np.full(50, 2.5))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            silverman_bandwidth(np.array([1.0]))


class TestKwWeights:
    def test_single_pair(self):
        ws = kw_weights(np.array([0.0]), np.array([0.0]), np.array([5.0]),
                        KernelSpec("triangular", 1.0))
        np.testing.assert_allclose(ws.w, [5.0])

    def test_symmetric_split(self):
        ws = kw_weights(np.array([-1.0, 1.0]), np.array([0.0]), np.array([2.0]),
                        KernelSpec("triangular", 2.0))
        np.testing.assert_allclose(ws.w, [1.0, 1.0])

    def test_out_of_support_unit_gets_zero(self):
        ws = kw_weights(np.array([0.0, 10.0]), np.array([0.1]), np.array([7.0]),
                        KernelSpec("triangular", 1.0))
        np.testing.assert_allclose(ws.w, [7.0, 0.0])

    def test_fallback_to_nearest(self):
        # survey score outside every support: full mass to the closest score
        ws = kw_weights(np.array([0.0, 4.0]), np.array([10.0]), np.array([3.0]),
                        KernelSpec("triangular", 1.0))
        np.testing.assert_allclose(ws.w, [0.0, 3.0])
        assert ws.n_fallback == 1

    def test_fallback_tie_goes_to_lower_index(self):
        w, n_fb = kw_weight_sums(np.array([5.0, -5.0]), np.array([0.0]),
                                 np.array([1.0]), "triangular", 1.0)
        assert n_fb == 1
        np.testing.assert_allclose(w, [1.0, 0.0])

    def test_mass_conservation_random(self, rng):
        for _ in range(50):
            n_c = int(rng.integers(5, 200))
            n_s = int(rng.integers(5, 200))
            qc = rng.normal(size=n_c)
            qs = rng.normal(rng.uniform(-3, 3), 1, size=n_s)
            omega = rng.uniform(1, 100, n_s)
            kind = str(rng.choice(["triangular", "epanechnikov", "gaussian"]))
            h = float(rng.uniform(0.05, 2.0))
            ws = kw_weights(qc, qs, omega, KernelSpec(kind, h))
            assert abs(ws.w.sum() - omega.sum()) <= 1e-10 * omega.sum()
            assert np.all(ws.w >= 0)

    def test_mass_conservation_with_forced_fallbacks(self, rng):
        qc = rng.normal(size=40)
        qs = np.concatenate([rng.normal(size=30), rng.normal(50, 1, size=10)])
        omega = rng.uniform(1, 20, 40)
        ws = kw_weights(qc, qs, omega, KernelSpec("epanechnikov", 0.3))
        assert ws.n_fallback >= 10
        assert abs(ws.w.sum() - omega.sum()) <= 1e-10 * omega.sum()

    def test_intercept_shift_invariance(self, rng):
        qc = rng.normal(size=60)
        qs = rng.normal(size=80)
        omega = rng.uniform(1, 50, 80)
        spec = KernelSpec("gaussian", 0.4)
        base = kw_weights(qc, qs, omega, spec).w
        for c in (-5.0, 1.0, 100.0):
            shifted = kw_weights(qc + c, qs + c, omega, spec).w
            np.testing.assert_allclose(shifted, base, rtol=1e-12, atol=1e-12)

    def test_locality_of_compact_kernels(self, rng):
        # a cohort unit farther than h from every survey score gets zero
        qc = np.array([0.0, 0.1, 5.0])
        qs = rng.uniform(-0.5, 0.5, 20)
        ws = kw_weights(qc, qs, np.ones(20), KernelSpec("triangular", 1.0))
        assert ws.w[2] == 0.0
        assert ws.w[:2].sum() == pytest.approx(20.0)

    def test_silverman_default_used(self, rng):
        qc = rng.normal(size=100)
        qs = rng.normal(size=100)
        ws = kw_weights(qc, qs, np.ones(100), KernelSpec("triangular"))
        assert ws.bandwidth == pytest.approx(
            silverman_bandwidth(np.concatenate([qc, qs])))

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            KernelSpec("triangular", -1.0)
        with pytest.raises(ValueError):
            kw_weights(np.zeros(2), np.zeros(2), np.ones(2),
                       KernelSpec("triangular", 1.0), h=0.0)


class TestIpswWeights:
    def test_reciprocal(self):
        ws = ipsw_weights(np.array([0.5, 0.1, 1.0]))
        np.testing.assert_allclose(ws.w, [2.0, 10.0, 1.0])

    def test_positive_rates_required(self):
        with pytest.raises(ValueError):
            ipsw_weights(np.array([0.5, 0.0]))


class TestKwJacobian:
    def test_column_sums_zero(self, rng):
        n_c, n_s, k = 40, 50, 3
        qc = rng.normal(size=n_c)
        qs = rng.normal(size=n_s)
        Xc = np.column_stack([np.ones(n_c), rng.normal(size=(n_c, k - 1))])
        Xs = np.column_stack([np.ones(n_s), rng.normal(size=(n_s, k - 1))])
        omega = rng.uniform(1, 30, n_s)
        for kind in ("triangular", "epanechnikov", "gaussian"):
            jac = kw_jacobian(qc, qs, Xc, Xs, omega, KernelSpec(kind, 0.5), 0.5)
            np.testing.assert_allclose(jac.sum(axis=0), 0.0, atol=1e-9)

    def test_finite_difference_oracle(self, rng):
        # smooth kernel so central differences are valid everywhere
        n_c, n_s, k = 25, 30, 3
        Xc = np.column_stack([np.ones(n_c), rng.normal(size=(n_c, k - 1))])
        Xs = np.column_stack([np.ones(n_s), rng.normal(size=(n_s, k - 1))])
        omega = rng.uniform(1, 10, n_s)
        beta = rng.normal(scale=0.3, size=k)
        h = 0.6
        spec = KernelSpec("gaussian", h)

        def weights_at(b):
            return kw_weights(Xc @ b, Xs @ b, omega, spec, h=h).w

        jac = kw_jacobian(Xc @ beta, Xs @ beta, Xc, Xs, omega, spec, h)
        step = 1e-6
        for j in range(k):
            e = np.zeros(k)
            e[j] = step
            fd = (weights_at(beta + e) - weights_at(beta - e)) / (2 * step)
            np.testing.assert_allclose(jac[:, j], fd, rtol=1e-5, atol=1e-7)

    def test_fallback_column_contributes_zero(self):
        qc = np.array([0.0, 1.0])
        qs = np.array([50.0])
        Xc = np.column_stack([np.ones(2), qc])
        Xs = np.column_stack([np.ones(1), qs])
        jac = kw_jacobian(qc, qs, Xc, Xs, np.array([4.0]),
                          KernelSpec("triangular", 1.0), 1.0)
        np.testing.assert_array_equal(jac, 0.0)


class TestComputePseudoweights:
    def test_unknown_method(self):
        cohort = make_cohort(intercept_only(5))
        survey = make_survey(intercept_only(5), d=np.ones(5))
        with pytest.raises(ValueError, match="unknown method"):
            compute_pseudoweights("PSAS", cohort, survey)

    def test_ipsw_intercept_only(self):
        cohort = make_cohort(intercept_only(100))
        survey = make_survey(intercept_only(300), d=np.full(300, 3.0))
        fit, ws = compute_pseudoweights("IPSW", cohort, survey)
        np.testing.assert_allclose(ws.w, 9.0, atol=1e-8)
        assert ws.jac.shape == (100, 1)
        np.testing.assert_allclose(ws.jac[:, 0], -9.0, atol=1e-7)

    def test_ipsw_scaled_matches_unscaled_intercept_only(self, rng):
        cohort = make_cohort(intercept_only(100))
        survey = make_survey(intercept_only(300), d=rng.uniform(1, 50, 300))
        _, w_plain = compute_pseudoweights("IPSW", cohort, survey)
        _, w_scaled = compute_pseudoweights("IPSW.S", cohort, survey)
        np.testing.assert_allclose(w_scaled.w, w_plain.w, atol=1e-8)

    def test_kw_family_distributes_original_weights(self, rng):
        x_c = rng.normal(0.3, 1, 150)
        x_s = rng.normal(size=200)
        cohort = make_cohort(make_matrix(x_c))
        survey = make_survey(make_matrix(x_s), d=rng.uniform(5, 50, 200))
        for method in ("KW", "KW.W", "KW.S"):
            _, ws = compute_pseudoweights(method, cohort, survey)
            assert ws.w.sum() == pytest.approx(survey.d.sum(), rel=1e-10)

    def test_kw_equal_split_intercept_only(self):
        # constant scores in both samples: every survey weight splits evenly
        cohort = make_cohort(intercept_only(10))
        survey = make_survey(intercept_only(20), d=np.full(20, 2.0))
        spec = KernelSpec("triangular", 1.0)
        for method in ("KW", "KW.W", "KW.S"):
            _, ws = compute_pseudoweights(method, cohort, survey, kernel=spec)
            np.testing.assert_allclose(ws.w, 4.0, atol=1e-10)

    def test_need_jacobian_false_skips_it(self, rng):
        cohort = make_cohort(make_matrix(rng.normal(size=30)))
        survey = make_survey(make_matrix(rng.normal(size=40)), d=np.ones(40))
        _, ws = compute_pseudoweights("KW.S", cohort, survey, need_jacobian=False)
        assert ws.jac is None

    def test_shared_fit_reused(self, rng):
        cohort = make_cohort(make_matrix(rng.normal(size=30)))
        survey = make_survey(make_matrix(rng.normal(size=40)), d=rng.uniform(1, 5, 40))
        fit1, ws1 = compute_pseudoweights("KW.W", cohort, survey)
        fit2, ws2 = compute_pseudoweights("KW.W", cohort, survey, fit=fit1)
        assert fit2 is fit1
        np.testing.assert_array_equal(ws1.w, ws2.w)
