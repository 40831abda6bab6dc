import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coordiff.composition import (
    ComposedScore,
    GuidanceConfig,
    ProductPolicy,
    ReflectedScore,
    codi_guidance_score,
    codi_sample,
    codi_weights,
    independent_policy,
    product_score,
    tweedie_posterior,
)
from coordiff.diffusion import GaussianScore, NoiseSchedule
from coordiff.exceptions import DegenerateWeightsError, DimensionError, NumericDivergenceError, ValidationError


def unit_policy(n=2, width=1):
    return independent_policy([GaussianScore(np.zeros(width), np.ones(width))] * n, [width] * n)


def quad_cost(s, a):
    return 0.5 * np.sum(a * a, axis=1)


class TestProductScore:
    def test_single_agent_identity(self, rng):
        g = GaussianScore([0.3, -1.0], [0.5, 2.0])
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(product_score(independent_policy([g], [2]), x, 0.7), g(x, 0.7))

    def test_two_unit_gaussians(self):
        out = product_score(unit_policy(), np.array([1.5, -2.0]), 0.5)
        np.testing.assert_allclose(out, [-1.5 / 1.25, 2.0 / 1.25])

    def test_block_independence(self, rng):
        pol = independent_policy([GaussianScore([1.0]), GaussianScore([0.0, 0.0], [1.0, 3.0])], [1, 2])
        x = rng.normal(size=(3, 3))
        y = x.copy()
        y[:, 1:] += rng.normal(size=(3, 2))
        assert np.array_equal(product_score(pol, x, 0.2)[:, 0], product_score(pol, y, 0.2)[:, 0])

    def test_layout_mismatch(self):
        with pytest.raises(DimensionError):
            product_score(unit_policy(), np.zeros(3), 0.5)
        with pytest.raises(DimensionError):
            ProductPolicy([GaussianScore()], [lambda s: None] * 2, [1])

    def test_conditioning_routed_per_agent(self):
        seen = []

        def model(x, t, cond):
            seen.append(cond)
            return np.zeros_like(x)

        pol = ProductPolicy([model, model], [lambda s: s["a"], lambda s: s["b"]], [1, 1])
        product_score(pol, np.zeros(2), 1.0, {"a": 1, "b": 2})
        assert seen == [1, 2]

    def test_reflected_score(self, rng):
        g = GaussianScore([1.0, 2.0], [1.0, 1.0])
        r = ReflectedScore(g, np.array([-1.0, 1.0]))
        x = rng.normal(size=(3, 2))
        # score of -a1 when a1 ~ N(1, .): mean flips
        np.testing.assert_allclose(r(x, 0.5), GaussianScore([-1.0, 2.0], [1.0, 1.0])(x, 0.5))


class TestTweedie:
    @pytest.mark.parametrize("mu0,var0,t", [(0.0, 1.0, 0.5), (1.5, 0.3, 2.0), (-2.0, 4.0, 0.05)])
    def test_gaussian_posterior(self, mu0, var0, t):
        pol = independent_policy([GaussianScore([mu0], [var0])], [1])
        a_t = np.array([[0.7], [-3.0]])
        post = tweedie_posterior(pol, a_t, t, jacobian=True)
        np.testing.assert_allclose(post.mean[:, 0], (var0 * a_t[:, 0] + t * t * mu0) / (var0 + t * t), rtol=1e-12)
        np.testing.assert_allclose(post.cov_diag, t * t * var0 / (var0 + t * t), rtol=1e-12)

    def test_zero_score(self):
        pol = independent_policy([lambda x, t, c: np.zeros_like(x)], [2])
        post = tweedie_posterior(pol, np.array([1.0, 2.0]), 0.3)
        np.testing.assert_array_equal(post.mean, [1.0, 2.0])
        np.testing.assert_allclose(post.cov_diag, [0.09, 0.09])

    def test_default_drops_jacobian(self):
        post = tweedie_posterior(unit_policy(1), np.array([0.5]), 0.8)
        assert post.cov_diag[0] == pytest.approx(0.64)

    def test_finite_difference_jacobian_for_plain_callables(self):
        g = GaussianScore([0.0], [0.5])
        pol = independent_policy([lambda x, t, c: g(x, t)], [1])
        post = tweedie_posterior(pol, np.array([0.2]), 0.5, jacobian=True)
        assert post.cov_diag[0] == pytest.approx(0.25 * 0.5 / 0.75, rel=1e-8)

    def test_non_finite(self):
        pol = independent_policy([lambda x, t, c: np.full_like(x, np.inf)], [1])
        with pytest.raises(NumericDivergenceError):
            tweedie_posterior(pol, np.zeros(1), 0.5)

    def test_needs_positive_time(self):
        with pytest.raises(ValidationError):
            tweedie_posterior(unit_policy(1), np.zeros(1), 0.0)


class TestWeights:
    def test_constant_costs(self):
        assert np.all(codi_weights(np.full(7, 3.2), 0.1).weights == 0.0)

    def test_hand_example(self):
        w = codi_weights([0.0, np.log(3.0)], 1.0)
        np.testing.assert_allclose(w.weights, [0.5, -0.5], rtol=1e-14)
        assert w.mu_w == pytest.approx(2.0 / 3.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64), st.floats(1e-3, 1e3))
    @settings(max_examples=200, deadline=None)
    def test_sum_to_zero(self, costs, lam):
        w = codi_weights(costs, lam).weights
        assert abs(w.sum()) < 1e-9 * max(1.0, len(costs))
        assert np.all(w >= -1.0)

    def test_no_underflow(self):
        w = codi_weights([1e4, 1e4 + 1e-3], 1e-3).weights
        assert np.all(np.isfinite(w)) and w[0] > 0 > w[1]

    def test_all_infinite(self):
        with pytest.raises(DegenerateWeightsError):
            codi_weights([np.inf, np.inf], 1.0)

    def test_partial_infinite(self):
        np.testing.assert_allclose(codi_weights([0.0, np.inf], 1.0).weights, [1.0, -1.0])

    @pytest.mark.parametrize("bad", [[np.nan], [-np.inf, 0.0], []])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            codi_weights(bad, 1.0)

    def test_rowwise(self):
        w = codi_weights(np.array([[0.0, 1.0], [2.0, 2.0]]), 1.0).weights
        np.testing.assert_allclose(w.sum(axis=1), 0.0, atol=1e-15)
        assert np.all(w[1] == 0)


class TestGuidance:
    def test_constant_cost_exact_zero(self, rng):
        cfg = GuidanceConfig(lam=0.1, mc_samples=32, cost=lambda s, a: np.full(len(a), 4.0))
        g = codi_guidance_score(unit_policy(), rng.normal(size=(5, 2)), 0.7, None, cfg, rng)
        assert np.all(g == 0.0)

    @pytest.mark.parametrize("a", [-1.0, 0.0, 1.0])
    def test_gaussian_tilt_oracle(self, a):
        # prior N(0,1), J = a^2/2, lam = 1 -> tilted N(0,1/2); g = grad log pi_t - grad log p_t
        t = 0.5
        exact = -a / (0.5 + t * t) + a / (1.0 + t * t)
        cfg = GuidanceConfig(lam=1.0, mc_samples=4096, cost=quad_cost, jacobian=True)
        est = codi_guidance_score(unit_policy(1), np.array([a]), t, None, cfg, 0)[0]
        assert abs(est - exact) < 0.05

    def test_scale_invariance(self, rng):
        x = rng.normal(size=(3, 2))
        c1 = GuidanceConfig(lam=0.5, mc_samples=16, cost=quad_cost)
        c2 = GuidanceConfig(lam=5.0, mc_samples=16, cost=lambda s, a: 10.0 * quad_cost(s, a))
        g1 = codi_guidance_score(unit_policy(), x, 0.3, None, c1, 9)
        g2 = codi_guidance_score(unit_policy(), x, 0.3, None, c2, 9)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)

    def test_seeded_purity(self, rng):
        x = rng.normal(size=(2, 2))
        cfg = GuidanceConfig(lam=1.0, mc_samples=8, cost=quad_cost)
        a = codi_guidance_score(unit_policy(), x, 0.3, None, cfg, 4)
        b = codi_guidance_score(unit_policy(), x, 0.3, None, cfg, 4)
        assert a.tobytes() == b.tobytes()

    def test_single_cost_call(self, rng):
        calls = []

        def cost(s, a):
            calls.append(a.shape)
            return quad_cost(s, a)

        cfg = GuidanceConfig(lam=1.0, mc_samples=8, cost=cost)
        codi_guidance_score(unit_policy(), rng.normal(size=(5, 2)), 0.3, None, cfg, rng)
        assert calls == [(40, 2)]

    def test_block_structure_zero_mean(self):
        # cost depends on agent 0 only; agent 1's guidance block averages to zero
        cfg = GuidanceConfig(lam=1.0, mc_samples=16, cost=lambda s, a: 0.5 * a[:, 0] ** 2)
        rng = np.random.default_rng(0)
        g = np.array([codi_guidance_score(unit_policy(), np.array([0.4, -0.3]), 0.5, None, cfg, rng)
                      for _ in range(1000)])
        se = g[:, 1].std() / np.sqrt(len(g))
        assert abs(g[:, 1].mean()) < 3 * se

    def test_per_agent_columns(self, rng):
        def cost(s, a):
            return np.stack([0.5 * a[:, 0] ** 2, np.zeros(len(a))], axis=1)

        cfg = GuidanceConfig(lam=1.0, mc_samples=32, cost=cost, per_agent=True)
        g = codi_guidance_score(unit_policy(), rng.normal(size=(4, 2)), 0.5, None, cfg, rng)
        assert np.all(g[:, 1] == 0) and np.any(g[:, 0] != 0)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            GuidanceConfig(lam=0.0, cost=quad_cost)
        with pytest.raises(ValidationError):
            GuidanceConfig(mc_samples=0, cost=quad_cost)
        with pytest.raises(ValidationError):
            GuidanceConfig(cost=None)
        GuidanceConfig(enabled=False)


class TestSampling:
    def test_unguided_independence(self):
        a = codi_sample(unit_policy(), None, GuidanceConfig(enabled=False), NoiseSchedule(), 0, n_samples=10_000)
        assert abs(np.corrcoef(a.T)[0, 1]) < 0.05

    def test_constant_cost_reproduces_unguided(self):
        sched = NoiseSchedule(n_steps=20)
        off = codi_sample(unit_policy(), None, GuidanceConfig(enabled=False), sched, 11, n_samples=50)
        cfg = GuidanceConfig(lam=0.1, mc_samples=8, cost=lambda s, a: np.ones(len(a)))
        on = codi_sample(unit_policy(), None, cfg, sched, 11, n_samples=50)
        assert on.tobytes() == off.tobytes()

    def test_vanishing_tilt(self):
        sched = NoiseSchedule(n_steps=100)
        n = 10_000
        a = codi_sample(unit_policy(1), None, GuidanceConfig(lam=1e6, mc_samples=8, cost=quad_cost), sched, 3,
                        n_samples=n)[:, 0]
        b = codi_sample(unit_policy(1), None, GuidanceConfig(enabled=False), sched, 4, n_samples=n)[:, 0]
        assert abs(a.mean() - b.mean()) < 3 * np.sqrt(2.0 / n)
        assert abs(a.var() - b.var()) < 3 * np.sqrt(2 * 2.0 / n) * b.var()

    def test_pairwise_coupling(self):
        cfg = GuidanceConfig(lam=1.0, mc_samples=64, cost=lambda s, a: 0.5 * (a[:, 0] - a[:, 1]) ** 2,
                             jacobian=True)
        a = codi_sample(unit_policy(), None, cfg, NoiseSchedule(n_steps=200), 5, n_samples=10_000)
        assert abs(np.var(a[:, 0] - a[:, 1]) - 2.0 / 3.0) < 0.15 * 2.0 / 3.0

    def test_gradient_field_override(self):
        sched = NoiseSchedule(n_steps=100)
        a = codi_sample(unit_policy(1), None, GuidanceConfig(enabled=False), sched, 0, n_samples=5000,
                        guidance_field=lambda x, t: x / (1.0 + t * t) - x / (0.5 + t * t))
        # exact tilt score; 1.046 is the 100-step integrator inflation
        assert a.var() == pytest.approx(0.5 * 1.046, rel=0.08)

    def test_composed_score_plain(self, rng):
        x = rng.normal(size=(2, 2))
        cs = ComposedScore(unit_policy(), None, None, 0)
        np.testing.assert_array_equal(cs(x, 0.5), product_score(unit_policy(), x, 0.5))
