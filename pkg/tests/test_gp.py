import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robocoord import gp
from robocoord.errors import DomainError
from robocoord.gp import GpModel, Hyperparameters, ObservationSet

THETA = Hyperparameters(sigma_s2=0.01, sigma_n2=1e-4, ell_s=20.0)


def matern(r, theta):
    a = math.sqrt(3.0) * abs(r) / theta.ell_s
    return theta.sigma_s2 * (1.0 + a) * math.exp(-a)


# both oracles carry the model's 1e-12 diagonal jitter
def dense_posterior(p, e, theta, p_star):
    """Textbook posterior with an explicit matrix inverse."""
    K = np.array([[matern(a - b, theta) for b in p] for a in p]) + (theta.sigma_n2 + gp.JITTER) * np.eye(len(p))
    k = np.array([matern(a - p_star, theta) for a in p])
    Kinv = np.linalg.inv(K)
    return k @ Kinv @ e, matern(0.0, theta) - k @ Kinv @ k


def dense_lml(p, e, theta):
    K = np.array([[matern(a - b, theta) for b in p] for a in p]) + (theta.sigma_n2 + gp.JITTER) * np.eye(len(p))
    return -0.5 * e @ np.linalg.inv(K) @ e - 0.5 * math.log(np.linalg.det(K)) - 0.5 * len(p) * math.log(2 * math.pi)


def sample_gp(theta, p, rng):
    K = np.array([[matern(a - b, theta) for b in p] for a in p])
    L = np.linalg.cholesky(K + 1e-12 * np.eye(len(p)))
    return L @ rng.standard_normal(len(p)) + math.sqrt(theta.sigma_n2) * rng.standard_normal(len(p))


small_sets = st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.5, 50.0), min_size=n, max_size=n, unique=True),
    st.lists(st.floats(-0.2, 0.2), min_size=n, max_size=n),
))
thetas = st.builds(Hyperparameters, st.floats(1e-3, 1.0), st.floats(1e-3, 0.1), st.floats(1.0, 40.0))


class TestKernel:
    def test_zero_lag(self):
        assert gp.kernel(3.0, 3.0, THETA) == THETA.sigma_s2

    def test_unit_value(self):
        theta = Hyperparameters(1.0, 0.0, 1.0)
        s3 = math.sqrt(3.0)
        assert gp.kernel(0.0, 1.0, theta) == pytest.approx((1 + s3) * math.exp(-s3), rel=1e-14)
        assert gp.kernel(0.0, 1.0, theta) == pytest.approx(0.48335, abs=1e-5)

    def test_symmetric_and_decaying(self):
        r = np.linspace(0, 200, 400)
        k = gp.kernel(0.0, r, THETA)
        assert np.all(np.diff(k) < 0)
        assert k[-1] < 1e-6 * THETA.sigma_s2
        np.testing.assert_array_equal(gp.kernel(r, 0.0, THETA), k)


class TestObservationSet:
    def test_rejects_duplicates(self):
        with pytest.raises(DomainError):
            ObservationSet([1.0, 1.0, 2.0], [0.0, 0.0, 0.0])

    def test_rejects_unsorted(self):
        with pytest.raises(DomainError):
            ObservationSet([2.0, 1.0], [0.0, 0.0])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DomainError):
            ObservationSet([1.0, 2.0], [0.0])


class TestLogMarginalLikelihood:
    def test_scalar_case(self):
        theta = Hyperparameters(0.3, 0.05, 5.0)
        obs = ObservationSet([1.0], [0.5])
        s = theta.sigma_s2 + theta.sigma_n2 + gp.JITTER
        expected = -0.5 * 0.25 / s - 0.5 * math.log(s) - 0.5 * math.log(2 * math.pi)
        assert gp.log_marginal_likelihood(theta, obs) == pytest.approx(expected, abs=1e-10)

    def test_two_point_explicit_algebra(self):
        theta = Hyperparameters(0.2, 0.01, 7.0)
        p, e = [1.0, 4.0], np.array([0.1, -0.3])
        a = theta.sigma_s2 + theta.sigma_n2 + gp.JITTER
        b = matern(3.0, theta)
        det = a * a - b * b
        quad = (a * e[0] ** 2 - 2 * b * e[0] * e[1] + a * e[1] ** 2) / det
        expected = -0.5 * quad - 0.5 * math.log(det) - math.log(2 * math.pi)
        assert gp.log_marginal_likelihood(theta, ObservationSet(p, e)) == pytest.approx(expected, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(small_sets, thetas)
    def test_matches_dense_formula(self, data, theta):
        p, e = sorted(data[0]), np.array(data[1])
        got = gp.log_marginal_likelihood(theta, ObservationSet(p, e))
        assert got == pytest.approx(dense_lml(p, e, theta), abs=1e-10, rel=1e-10)

    def test_jitter_perturbation_is_negligible(self):
        rng = np.random.default_rng(3)
        p = np.arange(1.0, 51.0)
        obs = ObservationSet(p, sample_gp(THETA, p, rng))
        base = gp.log_marginal_likelihood(THETA, obs)
        bumped = Hyperparameters(THETA.sigma_s2, THETA.sigma_n2 + 1e-12, THETA.ell_s)
        assert abs(gp.log_marginal_likelihood(bumped, obs) - base) < 1e-6


class TestPosterior:
    def test_single_point_interpolation(self):
        model = GpModel.build(ObservationSet([1.0], [0.5]), Hyperparameters(1.0, 0.0, 3.0))
        mu, var = gp.posterior_at(model, 1.0)
        assert mu == pytest.approx(0.5, abs=1e-10)
        assert var == pytest.approx(0.0, abs=1e-10)

    def test_reverts_to_prior_far_away(self):
        model = GpModel.build(ObservationSet([1.0, 2.0, 3.0], [0.1, 0.2, 0.3]), THETA)
        mu, var = gp.posterior_at(model, 1e4)
        assert abs(mu) < 1e-12
        assert var == pytest.approx(THETA.sigma_s2, rel=1e-9)

    def test_two_point_third_query(self):
        theta = Hyperparameters(0.2, 0.01, 7.0)
        p, e = [1.0, 4.0], np.array([0.1, -0.3])
        model = GpModel.build(ObservationSet(p, e), theta)
        a = theta.sigma_s2 + theta.sigma_n2 + gp.JITTER
        b = matern(3.0, theta)
        inv = np.array([[a, -b], [-b, a]]) / (a * a - b * b)
        k = np.array([matern(1.0 - 2.5, theta), matern(4.0 - 2.5, theta)])
        mu, var = gp.posterior_at(model, 2.5)
        assert mu == pytest.approx(k @ inv @ e, abs=1e-10)
        assert var == pytest.approx(theta.sigma_s2 - k @ inv @ k, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(small_sets, thetas, st.floats(0.0, 60.0))
    def test_matches_dense_inverse(self, data, theta, p_star):
        p, e = sorted(data[0]), np.array(data[1])
        mu, var = gp.posterior_at(GpModel.build(ObservationSet(p, e), theta), p_star)
        mu_ref, var_ref = dense_posterior(p, e, theta, p_star)
        assert mu == pytest.approx(mu_ref, abs=1e-10)
        assert var == pytest.approx(max(var_ref, 0.0), abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(small_sets, thetas, st.lists(st.floats(-10.0, 100.0), min_size=1, max_size=20))
    def test_variance_bounded_by_prior(self, data, theta, queries):
        model = GpModel.build(ObservationSet(sorted(data[0]), data[1]), theta)
        _, var = model.posterior(queries)
        assert np.all(var >= 0.0)
        assert np.all(var <= theta.sigma_s2)

    def test_noise_free_interpolation(self):
        p = np.arange(1.0, 21.0)
        e = 0.01 * np.sin(p / 3.0)
        model = GpModel.build(ObservationSet(p, e), Hyperparameters(0.01, 0.0, 5.0))
        mu, _ = model.posterior(p)
        np.testing.assert_allclose(mu, e, atol=1e-8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        p = np.sort(rng.uniform(0, 50, 12))
        e = rng.normal(0, 0.05, 12)
        q = np.linspace(-5, 80, 30)
        mu1, var1 = GpModel.build(ObservationSet(p, e), THETA).posterior(q)
        # build from a shuffled design by bypassing the sorted-input check
        perm = rng.permutation(12)
        shuffled = object.__new__(ObservationSet)
        object.__setattr__(shuffled, "positions", p[perm])
        object.__setattr__(shuffled, "errors", e[perm])
        mu2, var2 = GpModel.build(shuffled, THETA).posterior(q)
        np.testing.assert_allclose(mu1, mu2, atol=1e-8)
        np.testing.assert_allclose(var1, var2, atol=1e-8)


class TestFit:
    def test_optimum_dominates_true_theta(self):
        rng = np.random.default_rng(11)
        p = np.arange(1.0, 51.0)
        obs = ObservationSet(p, sample_gp(THETA, p, rng))
        fitted = gp.fit_hyperparameters(obs, seed=0)
        assert gp.log_marginal_likelihood(fitted, obs) >= gp.log_marginal_likelihood(THETA, obs) - 1e-6

    def test_no_signal_drives_variance_down(self):
        p = np.arange(1.0, 21.0)
        obs = ObservationSet(p, np.zeros_like(p))
        fitted = gp.fit_hyperparameters(obs, seed=0)
        assert fitted.sigma_s2 < 1e-6

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(2)
        p = np.arange(1.0, 31.0)
        obs = ObservationSet(p, sample_gp(THETA, p, rng))
        assert gp.fit_hyperparameters(obs, seed=4) == gp.fit_hyperparameters(obs, seed=4)

    def test_never_below_any_start_point(self):
        rng = np.random.default_rng(8)
        p = np.arange(1.0, 31.0)
        obs = ObservationSet(p, sample_gp(THETA, p, rng))
        fitted = gp.fit_hyperparameters(obs, seed=9)
        best = gp.log_marginal_likelihood(fitted, obs)
        for x0 in gp._start_points(obs, np.random.default_rng(9)):
            assert best >= gp.log_marginal_likelihood(Hyperparameters.from_log(x0), obs) - 1e-12

    def test_within_bounds(self):
        p = np.arange(1.0, 51.0)
        obs = ObservationSet(p, 0.012 * np.log1p(p) ** 1.5)
        x = gp.fit_hyperparameters(obs, seed=0).to_log()
        with np.errstate(divide="ignore"):
            for v, (lo, hi) in zip(x, gp.LOG_BOUNDS):
                assert v <= hi + 1e-9
                assert v >= lo - 1e-9 or v == -np.inf

    def test_needs_two_points(self):
        with pytest.raises(DomainError):
            gp.fit_hyperparameters(ObservationSet([1.0], [0.1]))
