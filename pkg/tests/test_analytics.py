import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coordiff.analytics import (
    DiscreteDist,
    dependence_ratio_check,
    gaussian_oracle_suite,
    identity_suite,
    kl,
    kl_decomposition_check,
    log_normalizer,
    optimal_cost,
    tilt,
    tilted_oracle_moments,
    total_variation,
)
from coordiff.exceptions import AbsoluteContinuityError, DimensionError, ValidationError

probs = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=10)


def dist(w):
    return DiscreteDist.from_weights(np.asarray(w))


class TestKLDecomposition:
    def test_zero_cost(self, rng):
        p, q = dist(rng.dirichlet(np.ones(8))), dist(rng.dirichlet(np.ones(8)))
        chk = kl_decomposition_check(p, q, np.zeros(8), 1.0)
        assert chk.gap < 1e-12
        assert chk.lhs == pytest.approx(kl(p, q), abs=1e-12)

    def test_target_equals_prior(self, rng):
        p = dist(rng.dirichlet(np.ones(8)))
        chk = kl_decomposition_check(p, p, np.zeros(8), 1.0)
        assert abs(chk.lhs) < 1e-15 and abs(chk.rhs) < 1e-15

    @given(probs, st.floats(0.05, 20.0), st.integers(0, 2 ** 31))
    @settings(max_examples=100, deadline=None)
    def test_random_instances(self, w, lam, seed):
        rng = np.random.default_rng(seed)
        p, q = dist(w), dist(rng.uniform(0.01, 1.0, len(w)))
        assert kl_decomposition_check(p, q, rng.normal(size=len(w)), lam).gap < 1e-10

    def test_support_violation(self):
        with pytest.raises(AbsoluteContinuityError):
            kl_decomposition_check(dist([0.5, 0.5]), DiscreteDist(np.arange(2), [1.0, 0.0]), np.zeros(2), 1.0)

    def test_kl_infinite_off_support(self):
        assert kl(dist([0.5, 0.5]), DiscreteDist(np.arange(2), [1.0, 0.0])) == np.inf

    def test_kl_hand_value(self):
        assert kl(dist([0.5, 0.5]), dist([0.25, 0.75])) == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3))

    def test_log_normalizer_uniform(self):
        assert log_normalizer(dist(np.ones(4)), np.zeros(4), 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_support_mismatch(self):
        with pytest.raises(DimensionError):
            kl(dist([0.5, 0.5]), dist([0.2, 0.3, 0.5]))


class TestOptimalCost:
    def test_target_equals_prior(self, rng):
        p = dist(rng.dirichlet(np.ones(8)))
        J = optimal_cost(p, p, 0.7)
        assert np.ptp(J) < 1e-15

    @given(probs, st.floats(0.05, 20.0), st.integers(0, 2 ** 31))
    @settings(max_examples=100, deadline=None)
    def test_tilt_recovers_target(self, w, lam, seed):
        rng = np.random.default_rng(seed)
        target, prior = dist(w), dist(rng.uniform(0.01, 1.0, len(w)))
        assert total_variation(tilt(prior, optimal_cost(target, prior, lam), lam), target) < 1e-10

    def test_linear_in_lambda(self, rng):
        t, p = dist(rng.dirichlet(np.ones(6))), dist(rng.dirichlet(np.ones(6)))
        a, b = optimal_cost(t, p, 1.3), optimal_cost(t, p, 2.6)
        np.testing.assert_allclose(b - b.mean(), 2 * (a - a.mean()), rtol=1e-12, atol=1e-14)

    def test_off_target_support_is_infinite(self):
        target = DiscreteDist(np.arange(3), [0.5, 0.5, 0.0])
        J = optimal_cost(target, dist([1, 1, 1]), 1.0)
        assert J[2] == np.inf
        assert total_variation(tilt(dist([1, 1, 1]), J, 1.0), target) < 1e-15

    def test_absolute_continuity(self):
        with pytest.raises(AbsoluteContinuityError):
            optimal_cost(dist([0.5, 0.5]), DiscreteDist(np.arange(2), [1.0, 0.0]), 1.0)

    def test_bad_lambda(self):
        with pytest.raises(ValidationError):
            optimal_cost(dist([0.5, 0.5]), dist([0.5, 0.5]), 0.0)


class TestGaussianOracle:
    def test_one_dimensional(self):
        m = tilted_oracle_moments([0.0], [[1.0]], [[1.0]], lam=1.0)
        assert m.cov[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert m.quad_cov[0, 0] == pytest.approx(0.5, rel=1e-6)

    def test_vanishing_tilt(self):
        m = tilted_oracle_moments([0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]], np.eye(2), lam=1e12, quadrature=False)
        np.testing.assert_allclose(m.mean, [0.3, -1.0], rtol=1e-10)
        np.testing.assert_allclose(m.cov, [[2.0, 0.5], [0.5, 1.0]], rtol=1e-10)

    def test_coupling(self):
        m = tilted_oracle_moments([0.0, 0.0], np.eye(2), [[1.0, -1.0], [-1.0, 1.0]], lam=1.0)
        v = np.array([1.0, -1.0])
        assert v @ m.cov @ v == pytest.approx(2.0 / 3.0, abs=1e-14)
        np.testing.assert_allclose(m.quad_cov, m.cov, rtol=1e-6, atol=1e-9)

    def test_linear_term_shifts_mean(self):
        m = tilted_oracle_moments([1.0], [[2.0]], [[0.0]], b=[1.0], lam=0.5)
        # precision 1/2, mean cov*(mu/S - b/lam) = 2*(0.5 - 2) = -3
        assert m.mean[0] == pytest.approx(-3.0)
        assert m.quad_mean[0] == pytest.approx(-3.0, rel=1e-6)

    def test_indefinite(self):
        with pytest.raises(ValidationError):
            tilted_oracle_moments([0.0], [[1.0]], [[-2.0]], lam=1.0)


class TestDependenceRatio:
    def test_independent(self, rng):
        P = np.outer(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4)))
        np.testing.assert_allclose(dependence_ratio_check(P / P.sum()).ratio, 1.0, rtol=1e-12)

    def test_perfect_correlation(self):
        r = dependence_ratio_check(np.array([[0.5, 0.0], [0.0, 0.5]]))
        np.testing.assert_array_equal(r.ratio, [[2.0, 0.0], [0.0, 2.0]])
        assert r.reconstruction_error == 0.0

    def test_random_tables(self, rng):
        for _ in range(50):
            assert dependence_ratio_check(rng.dirichlet(np.ones(36)).reshape(6, 6)).reconstruction_error < 1e-12

    def test_zero_marginal(self):
        with pytest.raises(ValidationError):
            dependence_ratio_check(np.array([[0.5, 0.0], [0.5, 0.0]]))


class TestSuites:
    def test_all_pass(self):
        for c in identity_suite(0) + gaussian_oracle_suite():
            assert c.passed, c

    def test_distribution_validation(self):
        with pytest.raises(ValidationError):
            DiscreteDist(np.arange(2), [0.6, 0.6])
        with pytest.raises(ValidationError):
            DiscreteDist(np.arange(2), [1.5, -0.5])
        with pytest.raises(DimensionError):
            DiscreteDist(np.arange(3), [0.5, 0.5])
