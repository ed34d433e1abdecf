import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.special import gammaln

from infocrit.errors import UsageError
from infocrit.models import (
    Dataset,
    FactorModel,
    GmmModel,
    dirichlet_logpdf,
    fa_pointwise_loglik,
    gmm_pointwise_loglik,
    lkj_corr2_logpdf,
    log_prior,
    model_from_config,
    plugin_deviance,
)
from infocrit.simulate import FaCondition, GmmCondition, generate_fa, generate_gmm, make_rng

FA_DATA = generate_fa(FaCondition(0.9, 1.0, 60, replicate=3))
GMM_DATA = generate_gmm(GmmCondition("ug1", replicate=1))


def _tiny_gmm():
    t = np.arange(3.0)
    ys = (np.array([6.1, 6.8, 7.0]), np.array([10.2, 12.4, 15.6]), np.array([5.0, 5.9, 6.1]))
    return Dataset("gmm", ys, times=(t, t, t))


def unconstrained(q):
    return arrays(np.float64, q, elements=st.floats(-2.5, 2.5, allow_nan=False))


class TestFactorModel:
    def test_q(self):
        assert FactorModel(6).q == 18

    def test_zero_loadings_factorize(self):
        m = FactorModel()
        c = m.constrain(make_rng(1).normal(size=18))
        c[m.loading_slice] = 0.0
        mu, _, sigma = m.unpack(c)
        expect = stats.norm.logpdf(FA_DATA.y, mu, sigma).sum(axis=1)
        np.testing.assert_allclose(fa_pointwise_loglik(m, c, FA_DATA), expect, rtol=1e-12)

    @given(unconstrained(18))
    def test_reflection(self, u):
        m = FactorModel()
        c = m.constrain(u)
        f = c.copy()
        f[m.loading_slice] *= -1
        np.testing.assert_allclose(m.pointwise_loglik(c, FA_DATA), m.pointwise_loglik(f, FA_DATA), rtol=1e-12)

    def test_dense_oracle(self):
        m = FactorModel()
        c = m.constrain(make_rng(2).normal(size=18))
        mu, lam, sigma = m.unpack(c)
        v = np.outer(lam, lam) + np.diag(sigma**2)
        expect = stats.multivariate_normal(mu, v).logpdf(FA_DATA.y)
        np.testing.assert_allclose(m.pointwise_loglik(c, FA_DATA), expect, rtol=1e-10)

    def test_batch_and_total_paths_agree(self):
        m = FactorModel()
        u = make_rng(3).normal(size=(7, 18))
        c = m.constrain(u)
        batch = m.pointwise_loglik_batch(c, FA_DATA)
        ref = np.stack([m.pointwise_loglik(ci, FA_DATA) for ci in c])
        np.testing.assert_allclose(batch, ref, rtol=1e-11)
        np.testing.assert_allclose(m.loglik_total_batch(u, FA_DATA), ref.sum(1), rtol=1e-10)

    def test_prior_at_zero(self):
        # 12 standard normals at 0 plus 6 N(log 0.6, 0.25) at 0, 50-digit value
        assert log_prior(FactorModel(), np.zeros(18)) == pytest.approx(-20.748382689968614, abs=1e-12)

    @given(unconstrained(18))
    def test_round_trip(self, u):
        m = FactorModel()
        c = m.constrain(u)
        np.testing.assert_allclose(m.constrain(m.unconstrain(c)), c, rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            FactorModel(5).pointwise_loglik(np.zeros(15), FA_DATA)

    def test_covariance_spd_with_floor(self):
        m = FactorModel()
        c = m.constrain(np.r_[np.zeros(12), np.full(6, -50.0)])
        assert np.all(np.linalg.eigvalsh(m.covariance(c)) >= 0.01 - 1e-12)


def _gmm_point(model, rng):
    return model.constrain(rng.normal(0.0, 1.0, model.q))


class TestGmmModel:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_q_and_names(self, k):
        m = GmmModel(k)
        assert m.q == 7 * k
        assert len(m.param_names) == m.n_constrained == 7 * k + 1

    def test_k1_is_single_mvn(self):
        m = GmmModel(1)
        c = m.pack([[6.0, 0.5, 0.01]], 0.8, 0.6, 0.2, 1.0, [1.0])
        t = GMM_DATA.times[0]
        x = np.column_stack([np.ones(5), t, t**2])
        cov = m.class_covariance(0.8, 0.6, 0.2, 1.0, t)
        expect = [stats.multivariate_normal(x @ [6.0, 0.5, 0.01], cov).logpdf(y) for y in GMM_DATA.y]
        np.testing.assert_allclose(gmm_pointwise_loglik(m, c, GMM_DATA), expect, rtol=1e-11)

    def test_merged_classes_equal_one_class(self):
        one = GmmModel(1).pack([[6.0, 0.5, 0.0]], 0.8, 0.6, 0.2, 1.0, [1.0])
        two = GmmModel(2).pack([[6.0, 0.5, 0.0]] * 2, [0.8] * 2, [0.6] * 2, [0.2] * 2, 1.0, [0.3, 0.7])
        np.testing.assert_allclose(
            GmmModel(2).pointwise_loglik(two, GMM_DATA), GmmModel(1).pointwise_loglik(one, GMM_DATA), rtol=1e-12
        )

    def test_empty_class_limit(self):
        rng = make_rng(4)
        m3, m2 = GmmModel(3), GmmModel(2)
        c2 = _gmm_point(m2, rng)
        p = m2.unpack(c2)
        beta = np.column_stack([p["beta0"], p["beta1"], p["beta2"]])
        pi = np.r_[p["pi"] * (1 - 1e-12), 1e-12]
        c3 = m3.pack(
            np.vstack([beta, [50.0, -3.0, 1.0]]), np.r_[p["sd1"], 1.0], np.r_[p["sd2"], 1.0],
            np.r_[p["rho"], 0.0], p["sigma_e"], pi,
        )
        np.testing.assert_allclose(m3.pointwise_loglik(c3, GMM_DATA), m2.pointwise_loglik(c2, GMM_DATA), atol=1e-10)

    def test_zero_weight_is_legal(self):
        m = GmmModel(2)
        c = m.pack([[6, 0.3, 0], [10, 2.7, 0]], [0.8, 0.5], [0.6, 0.3], [0.2, 0.8], 1.0, [1.0, 0.0])
        assert np.all(np.isfinite(m.pointwise_loglik(c, GMM_DATA)))

    def test_two_term_oracle(self):
        m = GmmModel(2)
        data = _tiny_gmm()
        c = m.pack([[6.0, 0.4, 0.0], [10.0, 2.5, 0.1]], [0.8, 0.5], [0.6, 0.3], [0.2, 0.8], 1.1, [0.35, 0.65])
        t = np.arange(3.0)
        x = np.column_stack([np.ones(3), t, t**2])
        expect = []
        for y in data.y:
            terms = 0.0
            for k, (beta, s1, s2, r, pi) in enumerate(
                [([6.0, 0.4, 0.0], 0.8, 0.6, 0.2, 0.35), ([10.0, 2.5, 0.1], 0.5, 0.3, 0.8, 0.65)]
            ):
                z = np.column_stack([np.ones(3), t])
                psi = np.array([[s1 * s1, r * s1 * s2], [r * s1 * s2, s2 * s2]])
                cov = z @ psi @ z.T + 1.1**2 * np.eye(3)
                terms += pi * stats.multivariate_normal(x @ beta, cov).pdf(y)
            expect.append(math.log(terms))
        np.testing.assert_allclose(m.pointwise_loglik(c, data), expect, rtol=1e-12)
        dev = plugin_deviance(m, c, data)
        assert dev == pytest.approx(-2 * sum(expect), rel=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_batch_matches_reference(self, k):
        m = GmmModel(k)
        rng = make_rng(10 + k)
        c = np.stack([_gmm_point(m, rng) for _ in range(5)])
        ref = np.stack([m.pointwise_loglik(ci, GMM_DATA) for ci in c])
        np.testing.assert_allclose(m.pointwise_loglik_batch(c, GMM_DATA), ref, rtol=1e-10, atol=1e-9)

    @pytest.mark.parametrize("sigma_e, rho", [(1e-3, 0.3), (1e-6, 0.3), (0.5, 0.9999999), (1e-6, -0.9999999)])
    def test_batch_near_singular_matches_high_precision(self, sigma_e, rho):
        # a class nearly singular covariance used to produce huge positive spikes
        m = GmmModel(2)
        beta = [[6.0, 0.4, 0.02], [9.0, 2.0, -0.1]]
        c = m.pack(beta, [0.8, 1.3], [0.6, 0.4], [rho, 0.1], sigma_e, [0.4, 0.6])
        mpmath.mp.dps = 60
        t = [mpmath.mpf(v) for v in range(5)]
        expect = []
        for y in GMM_DATA.y[:6]:
            total = mpmath.mpf(0)
            for (b0, b1, b2), s1, s2, r, pi in zip(beta, [0.8, 1.3], [0.6, 0.4], [rho, 0.1], [0.4, 0.6]):
                s1, s2, r = mpmath.mpf(s1), mpmath.mpf(s2), mpmath.mpf(r)
                cov = mpmath.matrix(5, 5)
                for i in range(5):
                    for j in range(5):
                        cov[i, j] = s1**2 + r * s1 * s2 * (t[i] + t[j]) + s2**2 * t[i] * t[j]
                    cov[i, i] += mpmath.mpf(sigma_e) ** 2
                resid = mpmath.matrix([mpmath.mpf(float(y[i])) - (b0 + b1 * t[i] + b2 * t[i] ** 2) for i in range(5)])
                quad = (resid.T * mpmath.lu_solve(cov, resid))[0]
                total += pi * mpmath.exp(-quad / 2) / mpmath.sqrt((2 * mpmath.pi) ** 5 * mpmath.det(cov))
            expect.append(float(mpmath.log(total)))
        got = m.pointwise_loglik_batch(c, GMM_DATA)[0, :6]
        np.testing.assert_allclose(got, expect, rtol=1e-7)

    def test_vanishing_noise_has_no_spike(self):
        m = GmmModel(2)
        values = []
        for sigma_e in (1e-2, 1e-5, 1e-10, 1e-150, 0.0):
            c = m.pack([[6.0, 0.4, 0.02], [1e14, 2.0, -0.1]], [0.2, 0.6], [5.0, 1.0], [0.6, 0.9], sigma_e, [1e-300, 1.0])
            values.append(m.pointwise_loglik_batch(c, GMM_DATA).sum())
        assert all(b < a for a, b in zip(values, values[1:])) and values[-1] == -np.inf

    @pytest.mark.parametrize("k", [2, 3])
    def test_label_permutation(self, k):
        m = GmmModel(k)
        rng = make_rng(20 + k)
        for _ in range(5):
            c = _gmm_point(m, rng)
            p = m.unpack(c)
            perm = rng.permutation(k)
            beta = np.column_stack([p["beta0"], p["beta1"], p["beta2"]])[perm]
            cp = m.pack(beta, p["sd1"][perm], p["sd2"][perm], p["rho"][perm], p["sigma_e"], p["pi"][perm])
            np.testing.assert_allclose(m.pointwise_loglik(cp, GMM_DATA), m.pointwise_loglik(c, GMM_DATA), rtol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_round_trip(self, k):
        m = GmmModel(k)
        rng = make_rng(30 + k)
        for _ in range(20):
            c = _gmm_point(m, rng)
            np.testing.assert_allclose(m.constrain(m.unconstrain(c)), c, rtol=1e-12, atol=1e-12)
            assert m.unpack(c)["pi"].sum() == pytest.approx(1.0, abs=1e-12)

    @given(unconstrained(21))
    def test_simplex_and_correlation_bounds(self, u):
        p = GmmModel(3).unpack(GmmModel(3).constrain(u))
        assert np.all(p["pi"] > 0) and abs(p["pi"].sum() - 1) <= 1e-12
        assert np.all(np.abs(p["rho"]) < 1)
        assert np.all(np.diff(p["beta0"]) > 0)

    def test_lkj_closed_form(self):
        assert lkj_corr2_logpdf(0.0) - lkj_corr2_logpdf(0.5) == pytest.approx(-math.log(0.75), rel=1e-14)
        # integrates to one over (-1, 1)
        grid = np.linspace(-1, 1, 200_001)[1:-1]
        assert np.trapezoid(np.exp(lkj_corr2_logpdf(grid, 3.0)), grid) == pytest.approx(1.0, abs=1e-8)

    def test_dirichlet_closed_form(self):
        # 9 * (2 log 0.5 - log 0.2 - log 0.8) at 50 digits
        diff = dirichlet_logpdf([0.5, 0.5], 10.0) - dirichlet_logpdf([0.2, 0.8], 10.0)
        assert diff == pytest.approx(4.0165839236557746, rel=1e-13)
        assert dirichlet_logpdf([0.2, 0.3, 0.5], [2.0, 3.0, 4.0]) == pytest.approx(
            stats.dirichlet([2.0, 3.0, 4.0]).logpdf([0.2, 0.3, 0.5]), rel=1e-12
        )

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_prior_includes_jacobian(self, k):
        # constrained-scale density times a finite-difference Jacobian
        m = GmmModel(k)
        u = make_rng(40 + k).normal(0.0, 0.7, m.q)
        c = m.constrain(u)
        p = m.unpack(c)
        beta = np.concatenate([p["beta0"], p["beta1"], p["beta2"]])
        dens = stats.norm(0, 10).logpdf(beta).sum() + (gammaln(k + 1) if k > 1 else 0.0)
        dens += stats.halfnorm(scale=10).logpdf(np.r_[p["sd1"], p["sd2"], p["sigma_e"]]).sum()
        dens += sum(math.log(stats.beta(2, 2).pdf((r + 1) / 2) / 2) for r in p["rho"])
        if k > 1:
            dens += stats.dirichlet(np.full(k, 10.0)).logpdf(p["pi"])
        h = 1e-6
        jac = np.empty((m.q, m.q))
        for i in range(m.q):
            e = np.zeros(m.q)
            e[i] = h
            jac[:, i] = (m.constrain(u + e)[: m.q] - m.constrain(u - e)[: m.q]) / (2 * h)
        _, logdet = np.linalg.slogdet(jac)
        assert m.log_prior(u) == pytest.approx(dens + logdet, abs=1e-6)

    def test_lkj_eta_is_a_knob(self):
        u = make_rng(5).normal(size=14)
        assert GmmModel(2, lkj_eta=1.0).log_prior(u) != GmmModel(2).log_prior(u)

    def test_config_round_trip(self):
        m = GmmModel(3, lkj_eta=1.5)
        assert model_from_config(m.to_config()).to_config() == m.to_config()
        assert model_from_config(FactorModel(6).to_config()).q == 18


class TestPluginDeviance:
    def test_equals_draw_deviance(self):
        m = FactorModel()
        c = m.constrain(make_rng(6).normal(size=18))
        assert plugin_deviance(m, c, FA_DATA) == pytest.approx(-2 * m.pointwise_loglik(c, FA_DATA).sum(), rel=1e-14)

    def test_non_finite_rejected(self):
        c = np.full(18, np.nan)
        with pytest.raises(UsageError):
            plugin_deviance(FactorModel(), c, FA_DATA)

    def test_sign_split_mean_is_worse(self):
        m = FactorModel()
        data = generate_fa(FaCondition(0.9, 1.0, 400, replicate=0))
        lam = 0.9 * np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
        pos = np.r_[np.zeros(6), lam, np.ones(6)]
        neg = np.r_[np.zeros(6), -lam, np.ones(6)]
        draws = np.stack([pos, neg])
        d_draws = -2 * m.pointwise_loglik_batch(draws, data).sum(1)
        assert plugin_deviance(m, draws.mean(0), data) > d_draws.min()


class TestDataset:
    def test_fa_needs_matrix(self):
        with pytest.raises(UsageError):
            Dataset("fa", np.zeros(5))

    def test_non_finite_rejected(self):
        with pytest.raises(UsageError):
            Dataset("fa", [[0.0, np.inf]])

    def test_gmm_needs_two_occasions(self):
        with pytest.raises(UsageError):
            Dataset("gmm", (np.array([1.0]),), times=(np.array([0.0]),))

    def test_unknown_design(self):
        with pytest.raises(UsageError):
            Dataset("xyz", [[0.0]])
