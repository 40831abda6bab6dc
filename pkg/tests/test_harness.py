import math

import numpy as np
import pytest

from coordiff.diffusion import GaussianScore
from coordiff.env import ACTION_DIM, EnvConfig, initial_state, step_dynamics
from coordiff.exceptions import ValidationError
from coordiff.harness import (
    METHODS,
    EpisodeResult,
    HandoffOracle,
    RunConfig,
    _pad_chunks,
    closed_loop_episode,
    compute_metrics,
    episode_seeds,
    evaluate_method,
    generate_demos,
    generate_joint_demos,
    joint_features,
    make_sampler,
    record_costs,
    sample_initial_state,
    state_from_features,
)

CFG = EnvConfig()
W1 = CFG.chunk_width
WJ = CFG.n_agents * CFG.chunk_width


class ZeroGrad:
    def gradient(self, x, t, cond=None):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def models():
    g = lambda w: GaussianScore(np.zeros(w), np.full(w, 0.1))
    return {"policy": g(W1), "joint_policy": g(WJ), "cost_model": ZeroGrad(),
            "dpmd": g(WJ), "sdac": g(WJ), "expo": g(WJ)}


def result(success, t=float("nan"), d=1.0, viol=0, steps=10):
    return EpisodeResult(success, t, d, viol, steps)


class TestMetrics:
    def test_fixture(self):
        rs = [result(True, 2.0, 0.1, 0, 20), result(True, 4.0, 0.1, 1, 40),
              result(False, d=0.5, viol=2, steps=40), result(False, d=0.9, steps=100)]
        m = compute_metrics(rs, "codi")
        assert m.success_rate == 0.5
        assert m.median_completion_time == 3.0
        assert m.median_min_distance == pytest.approx(0.3)
        assert m.collision_rate == pytest.approx(3 / 200)

    def test_no_success_time_nan(self):
        assert math.isnan(compute_metrics([result(False)]).median_completion_time)

    def test_empty(self):
        with pytest.raises(ValidationError):
            compute_metrics([])


class TestEpisodes:
    def test_object_at_goal_immediate(self):
        run = RunConfig(n_episodes=1)
        s0 = initial_state(CFG, CFG.goal)
        r = closed_loop_episode(lambda s, rng: pytest.fail("sampler should not run"), s0, run, 0)
        assert r.success and r.completion_time == 0.0 and r.steps == 0

    def test_oracle_solves_table(self):
        run = RunConfig(n_episodes=40, seed=7)
        m = compute_metrics(evaluate_method(HandoffOracle(CFG), run), "oracle")
        assert m.success_rate >= 0.95

    def test_trace_replays(self):
        run = RunConfig(n_episodes=1, max_steps=48)
        rng = np.random.default_rng(3)
        chunks = []
        oracle = HandoffOracle(CFG)

        def recording(state, rng):
            c = oracle(state, rng)
            chunks.append(c)
            return c

        r = closed_loop_episode(recording, sample_initial_state(CFG, rng), run, rng)
        s = r.trace[0]
        cmds = [c[:, k] for c in chunks for k in range(run.replan_stride)]
        for k, nxt in enumerate(r.trace[1:]):
            s = step_dynamics(s, cmds[k], CFG)
            assert s.same_as(nxt)

    def test_sampler_error_is_failure(self):
        def boom(state, rng):
            raise FloatingPointError("nan")

        r = closed_loop_episode(boom, sample_initial_state(CFG, 0), RunConfig(), 0)
        assert not r.success and "FloatingPointError" in r.error

    def test_seeds_are_independent_of_count(self):
        a = [g.random() for g in episode_seeds(5, 3)]
        b = [g.random() for g in episode_seeds(5, 6)][:3]
        assert a == b

    def test_initial_state_left_half(self, rng):
        for _ in range(50):
            s = sample_initial_state(CFG, rng)
            assert 0 <= s.obj[0] <= 0.5 * CFG.table[0]


class TestDemos:
    def test_pad_chunks(self):
        a = np.arange(12, dtype=float).reshape(4, 3)
        out = _pad_chunks(a, 3).reshape(4, 3, 3)
        np.testing.assert_array_equal(out[0], a[:3])
        np.testing.assert_array_equal(out[3, 1:, :2], 0.0)
        np.testing.assert_array_equal(out[3, 1:, 2], a[-1, 2])

    def test_shapes_and_determinism(self):
        a = generate_demos(0.5, 6, CFG, 11)
        b = generate_demos(0.5, 6, CFG, 11)
        assert a.actions.shape[1] == W1 and len(a) == len(a.roles)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_role_mix_validation(self):
        with pytest.raises(ValidationError):
            generate_demos(1.5, 2, CFG, 0)

    def test_joint_layout(self):
        ds = generate_joint_demos(2, CFG, 0)
        assert ds.actions.shape[1] == WJ and ds.meta["layout"] == "agent-major"
        # agent-major chunk: first K*3 entries belong to agent 0
        chunk = ds.actions[0].reshape(CFG.n_agents, CFG.chunk_length, ACTION_DIM)
        assert chunk.shape == (2, CFG.chunk_length, 3)

    def test_joint_features_roundtrip(self, rng):
        s = sample_initial_state(CFG, rng)
        assert state_from_features(joint_features(s), CFG).same_as(s)

    def test_record_costs_finite(self):
        ds = generate_joint_demos(1, CFG, 1)
        c = record_costs(ds, RunConfig().cost, CFG)
        assert c.shape == (len(ds),) and np.all(np.isfinite(c))


class TestSelector:
    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_samples(self, method):
        run = RunConfig(method=method, sde_steps=5, mc_samples=4)
        s = make_sampler(run, models())
        out = s(sample_initial_state(CFG, 0), np.random.default_rng(0))
        assert out.shape == (CFG.n_agents, CFG.chunk_length, ACTION_DIM)
        assert np.all(np.isfinite(out))

    @pytest.mark.parametrize("method", METHODS)
    def test_missing_artifact(self, method):
        with pytest.raises(ValidationError):
            make_sampler(RunConfig(method=method), {})

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            RunConfig(method="ppo")

    def test_config_roundtrip(self):
        run = RunConfig(lam=0.3, method="sdac")
        assert RunConfig.from_dict(run.to_dict()) == run

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"lamda": 1.0})

    def test_seed_determinism(self):
        run = RunConfig(n_episodes=2, max_steps=16, sde_steps=5, mc_samples=4)
        a = evaluate_method(make_sampler(run, models()), run, keep_trace=True)
        b = evaluate_method(make_sampler(run, models()), run, keep_trace=True)
        for x, y in zip(a, b):
            assert x.steps == y.steps and x.min_goal_distance == y.min_goal_distance
            assert all(s.same_as(t) for s, t in zip(x.trace, y.trace))
