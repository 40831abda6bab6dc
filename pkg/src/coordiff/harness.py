"""Demonstrations, closed-loop evaluation and metrics for the hand-off table."""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from ._validation import check_positive_int, check_random_state
from .composition import GuidanceConfig, ProductPolicy, ReflectedScore, codi_sample
from .diffusion import NoiseSchedule
from .env import (
    ACTION_DIM,
    CostSpec,
    EnvConfig,
    ScriptedExpert,
    WorldState,
    action_signs,
    evaluate_cost_batch,
    initial_state,
    mirror_x,
    reachable,
    sample_in_reach,
    state_decompose,
    step_dynamics,
    view_features,
)
from .exceptions import CoordiffError, ValidationError
from .score_net import DemoDataset

logger = logging.getLogger(__name__)

METHODS = ("codi", "codi-indep", "cg-joint", "cg-product", "dpmd", "sdac", "expo", "unguided")
ROLE_PICK, ROLE_YIELD = 0, 1


class DemoGenerationError(CoordiffError):
    """The scripted expert failed too often for the demonstrations to be trusted."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    cost: CostSpec = field(default_factory=lambda: CostSpec(variant="plain"))
    lam: float = 0.03
    mc_samples: int = 64
    jacobian: bool = False
    method: str = "codi"
    n_episodes: int = 50
    max_steps: int = 300
    replan_stride: int = 8
    sde_steps: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        check_positive_int(self.n_episodes, "n_episodes")
        check_positive_int(self.max_steps, "max_steps")
        check_positive_int(self.replan_stride, "replan_stride")
        check_positive_int(self.sde_steps, "sde_steps")
        if self.replan_stride > self.env.chunk_length:
            raise ValidationError("replan_stride cannot exceed the chunk length")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        env = d.pop("env", {}) or {}
        env = {k: tuple(map(tuple, v)) if k == "reach_centers" else (tuple(v) if isinstance(v, list) else v)
               for k, v in env.items()}
        cost = d.pop("cost", {}) or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(env=EnvConfig(**env), cost=CostSpec(**cost), **d)


@dataclass
class EpisodeResult:
    success: bool
    completion_time: float
    min_goal_distance: float
    collision_violations: int
    steps: int
    trace: List[WorldState] = field(default_factory=list, repr=False)
    error: Optional[str] = None


@dataclass(frozen=True)
class MetricsTable:
    method: str
    n_episodes: int
    success_rate: float
    median_completion_time: float
    median_min_distance: float
    collision_rate: float

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- demonstrations


def _pad_chunks(actions, K):
    """Receding-horizon windows ``actions[t:t+K]``, held past the end (zero speed, last grip)."""
    T, width = actions.shape
    tail = np.zeros((K - 1, width))
    tail[:, 2::ACTION_DIM] = actions[-1, 2::ACTION_DIM]
    padded = np.vstack([actions, tail])
    idx = np.arange(T)[:, None] + np.arange(K)[None, :]
    return padded[idx].reshape(T, K * width)


def _demo_episode(role, cfg, rng, max_steps, agent=0):
    """One single-agent expert episode; returns ``(features, actions, ok)``."""
    start = sample_in_reach(agent, cfg, rng)
    if role == ROLE_PICK:
        obj = sample_in_reach(agent, cfg, rng)
    else:
        obj = rng.uniform([0.05, 0.05], np.asarray(cfg.table) - 0.05)
    target = sample_in_reach(agent, cfg, rng)
    solo = replace(cfg, reach_centers=(cfg.reach_centers[agent],), reach_radius=(cfg.reach_radius[agent],))
    state = WorldState(start[None], [False], obj, cfg.goal)
    expert = ScriptedExpert(agent, "pick" if role == ROLE_PICK else "yield", cfg, target=target)
    feats, acts = [], []
    settled = 0
    for _ in range(max_steps):
        if rng.random() < cfg.reset_probability:
            # the object is knocked away; the expert has to go and get it again
            new_obj = sample_in_reach(agent, cfg, rng) if role == ROLE_PICK else rng.uniform(
                [0.05, 0.05], np.asarray(cfg.table) - 0.05)
            state = WorldState(state.grippers, state.closed, new_obj, state.goal)
            if expert.phase != "approach" and role == ROLE_PICK:
                expert.phase = "approach"
                expert.target = sample_in_reach(agent, cfg, rng)
        view = state_decompose(state, 0)
        view = type(view)(agent, view.ego, view.ego_closed, view.obj, view.goal)
        cmd = expert.act(view)
        feats.append(view_features(view, cfg, mirrored=False))
        acts.append(cmd)
        state = step_dynamics(state, cmd[None], solo)
        at_home = np.linalg.norm(state.grippers[0] - cfg.home[agent]) < 1e-3
        settled = settled + 1 if expert.phase == "home" and at_home else 0
        if settled >= cfg.chunk_length // 2:
            break
    ok = role == ROLE_YIELD or np.linalg.norm(state.obj - expert.target) <= 0.02
    return np.array(feats), np.array(acts), bool(ok)


def generate_demos(role_mix, count, cfg, rng, max_steps=200, max_failure_rate=0.2):
    """Expert episodes for the left-hand agent, sliced into ``(state, K-chunk)`` records.

    ``role_mix`` is the fraction of pick episodes (the rest are yield
    episodes). The right-hand agent reuses these through the mirror transform.
    """
    count = check_positive_int(count, "count")
    if not 0.0 <= role_mix <= 1.0:
        raise ValidationError("role_mix must lie in [0, 1]")
    rng = check_random_state(rng)
    n_pick = int(round(role_mix * count))
    roles = np.array([ROLE_PICK] * n_pick + [ROLE_YIELD] * (count - n_pick))
    rng.shuffle(roles)
    S, A, R = [], [], []
    failures = 0
    for role in roles:
        f, a, ok = _demo_episode(int(role), cfg, rng, max_steps)
        failures += not ok
        S.append(f)
        A.append(_pad_chunks(a, cfg.chunk_length))
        R.append(np.full(len(f), role, dtype=np.uint8))
    if failures > max_failure_rate * count:
        raise DemoGenerationError(f"expert failed in {failures} of {count} episodes")
    return DemoDataset(np.vstack(S), np.vstack(A), chunk_length=cfg.chunk_length, action_dim=ACTION_DIM,
                       control_rate=1.0 / cfg.dt, agent_id=0, roles=np.concatenate(R),
                       meta={"episodes": int(count), "pick_fraction": float(role_mix),
                             "expert_failures": int(failures)})


# ---------------------------------------------------------------- policies and samplers


def make_product_policy(models, cfg):
    """Product policy over the table's agents.

    ``models`` is one left-frame score model shared by all agents, or one
    per agent. Right-hand agents see mirrored features and flip ``vx``.
    """
    if not isinstance(models, (list, tuple)):
        models = [models] * cfg.n_agents
    mirrored = mirror_x(cfg)
    fields, decomposers = [], []
    for i, (m, mir) in enumerate(zip(models, mirrored)):
        fields.append(ReflectedScore(m, action_signs(cfg, True)) if mir else m)
        decomposers.append(lambda s, i=i, mir=mir: view_features(state_decompose(s, i), cfg, mir))
    return ProductPolicy(fields, decomposers, [cfg.chunk_width] * cfg.n_agents)


def cost_function(spec, cfg):
    """``J(state, actions (B, N*K*3))`` as the guidance estimator expects it."""

    def J(state, actions):
        return evaluate_cost_batch(state, actions, spec, cfg)

    return J


class Sampler:
    """Callable ``(state, rng) -> joint chunk (N, K, 3)`` for one method."""

    def __init__(self, policy, cfg, guidance=None, schedule=None, guidance_field=None, name="codi"):
        self.policy, self.cfg, self.guidance = policy, cfg, guidance
        self.schedule = schedule or NoiseSchedule()
        self.guidance_field = guidance_field
        self.name = name

    def __call__(self, state, rng):
        gf = None if self.guidance_field is None else (lambda x, t: self.guidance_field(state, x, t))
        a = codi_sample(self.policy, state, self.guidance, self.schedule, rng, guidance_field=gf)
        return a.reshape(self.cfg.n_agents, self.cfg.chunk_length, ACTION_DIM)


def codi_sampler(models, run, method=None):
    """Sampler for the product-policy family (``codi``, ``codi-indep``, ``unguided``)."""
    method = method or run.method
    cfg = run.env
    policy = make_product_policy(models, cfg)
    schedule = _schedule_for(models, run)
    if method == "unguided":
        return Sampler(policy, cfg, GuidanceConfig(enabled=False), schedule, name=method)
    spec = replace(run.cost, independent=True) if method == "codi-indep" else run.cost
    guidance = GuidanceConfig(lam=run.lam, mc_samples=run.mc_samples, cost=cost_function(spec, cfg),
                              jacobian=run.jacobian, per_agent=spec.independent)
    return Sampler(policy, cfg, guidance, schedule, name=method)


def joint_features(state):
    """Full-state conditioning ``[grippers, closed flags, object, held_by]`` for joint models."""
    return np.concatenate([state.grippers.ravel(), state.closed.astype(np.float64), state.obj,
                           [float(state.held_by)]])


def state_from_features(f, cfg):
    """Inverse of :func:`joint_features` (goal taken from ``cfg``)."""
    n = cfg.n_agents
    f = np.asarray(f, dtype=np.float64)
    return WorldState(f[: 2 * n].reshape(n, 2), f[2 * n: 3 * n] > 0.5, f[3 * n: 3 * n + 2], cfg.goal,
                      int(round(f[3 * n + 2])))


def joint_policy(model, cfg):
    """One score model over the stacked agent-major joint chunk, conditioned on the full state."""
    return ProductPolicy([model], [joint_features], [cfg.n_agents * cfg.chunk_width])


def generate_joint_demos(count, cfg, rng, max_steps=300, max_failure_rate=0.2):
    """Episodes of the two-expert oracle, sliced into ``(full state, joint K-chunk)`` records.

    Joint chunks are agent-major: all ``K`` steps of agent 0, then agent 1.
    """
    count = check_positive_int(count, "count")
    rng = check_random_state(rng)
    oracle = HandoffOracle(cfg)
    S, A = [], []
    failures = 0
    K, N = cfg.chunk_length, cfg.n_agents
    for _ in range(count):
        oracle.reset()
        state = sample_initial_state(cfg, rng)
        feats, cmds = [], []
        done = False
        while not done and len(cmds) < max_steps:
            chunk = oracle(state, rng)
            for k in range(K):
                feats.append(joint_features(state))
                cmds.append(chunk[:, k])
                state = step_dynamics(state, chunk[:, k], cfg)
                done = goal_distance(state) <= cfg.goal_tolerance or len(cmds) >= max_steps
                if done:
                    break
        failures += goal_distance(state) > cfg.goal_tolerance
        per_step = np.array(cmds)  # (T, N, 3)
        windows = _pad_chunks(per_step.reshape(len(cmds), N * ACTION_DIM), K)  # (T, K*N*3), time-major
        windows = windows.reshape(-1, K, N, ACTION_DIM).transpose(0, 2, 1, 3).reshape(len(cmds), -1)
        S.append(np.array(feats))
        A.append(windows)
    if failures > max_failure_rate * count:
        raise DemoGenerationError(f"oracle failed in {failures} of {count} episodes")
    return DemoDataset(np.vstack(S), np.vstack(A), chunk_length=K, action_dim=N * ACTION_DIM,
                       control_rate=1.0 / cfg.dt, agent_id=-1,
                       meta={"episodes": int(count), "layout": "agent-major", "oracle_failures": int(failures)})


def record_costs(dataset, spec, cfg):
    """Clean-action cost of every joint record (states rebuilt from their features)."""
    out = np.empty(len(dataset))
    for k in range(len(dataset)):
        out[k] = evaluate_cost_batch(state_from_features(dataset.states[k], cfg), dataset.actions[k:k + 1],
                                     spec, cfg)[0]
    return out


def cost_model_guidance(costmodel, lam):
    """Classifier-guidance field ``(state, a_t, t) -> -grad J_psi / lam``."""
    from .baselines import cg_guidance_score

    def field(state, x, t):
        return cg_guidance_score(costmodel, x, t, joint_features(state), lam)

    return field


def make_sampler(run, models):
    """Method selector: builds the sampler for ``run.method`` from trained artifacts.

    ``models`` maps ``"policy"`` (single-agent score), ``"joint_policy"``,
    ``"cost_model"`` and the fine-tuned joint models (``"dpmd"``, ``"sdac"``,
    ``"expo"``) to fitted objects; only those the method needs are required.
    """
    method, cfg = run.method, run.env

    def need(key):
        if key not in models:
            raise ValidationError(f"method {method!r} needs a trained {key!r}")
        return models[key]

    off = GuidanceConfig(enabled=False)
    if method in ("codi", "codi-indep", "unguided"):
        return codi_sampler(need("policy"), run)
    if method == "cg-product":
        pol = need("policy")
        return Sampler(make_product_policy(pol, cfg), cfg, off, _schedule_for(pol, run),
                       guidance_field=cost_model_guidance(need("cost_model"), run.lam), name=method)
    if method == "cg-joint":
        pol = need("joint_policy")
        return Sampler(joint_policy(pol, cfg), cfg, off, _schedule_for(pol, run),
                       guidance_field=cost_model_guidance(need("cost_model"), run.lam), name=method)
    pol = need(method)
    return Sampler(joint_policy(pol, cfg), cfg, off, _schedule_for(pol, run), name=method)


def _schedule_for(models, run):
    m = models[0] if isinstance(models, (list, tuple)) else models
    sched = getattr(m, "schedule_", None) or NoiseSchedule()
    return replace(sched, n_steps=run.sde_steps)


# ---------------------------------------------------------------- episodes


def sample_initial_state(cfg, rng):
    """Grippers at home, object uniform over the left half of the table."""
    rng = check_random_state(rng)
    w, h = cfg.table
    obj = rng.uniform([0.05, 0.05], [0.5 * w, h - 0.05])
    return initial_state(cfg, obj)


def goal_distance(state):
    return float(np.linalg.norm(state.obj - state.goal))


def closed_loop_episode(sampler, init_state, run, rng, keep_trace=True):
    """Replan every ``run.replan_stride`` steps until success or the step budget.

    A sampler exception ends the episode as a failure with ``error`` set.
    """
    rng = check_random_state(rng)
    cfg, spec = run.env, run.cost
    if hasattr(sampler, "reset"):
        sampler.reset()
    state = init_state
    trace = [state]
    best = goal_distance(state)
    violations = 0
    steps = 0
    error = None
    success = best <= cfg.goal_tolerance
    while not success and steps < run.max_steps:
        try:
            chunk = sampler(state, rng)
        except (CoordiffError, ArithmeticError, ValueError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            logger.warning("sampler failed at step %d: %s", steps, error)
            break
        for k in range(min(run.replan_stride, run.max_steps - steps)):
            state = step_dynamics(state, chunk[:, k], cfg)
            steps += 1
            if keep_trace:
                trace.append(state)
            if state.n_agents >= 2 and np.linalg.norm(state.grippers[0] - state.grippers[1]) < spec.collision_threshold:
                violations += 1
            best = min(best, goal_distance(state))
            if goal_distance(state) <= cfg.goal_tolerance:
                success = True
                break
    return EpisodeResult(success=bool(success), completion_time=steps * cfg.dt if success else float("nan"),
                         min_goal_distance=best, collision_violations=violations, steps=steps,
                         trace=trace if keep_trace else [], error=error)


def episode_seeds(seed, n):
    """Per-episode generators: children of ``SeedSequence(seed)`` in episode order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def evaluate_method(sampler, run, keep_trace=False):
    """Run ``run.n_episodes`` seeded episodes; each draws its own start state."""
    results = []
    for k, rng in enumerate(episode_seeds(run.seed, run.n_episodes)):
        init = sample_initial_state(run.env, rng)
        results.append(closed_loop_episode(sampler, init, run, rng, keep_trace=keep_trace))
        logger.info("%s episode %d success=%s steps=%d", getattr(sampler, "name", "?"), k,
                    results[-1].success, results[-1].steps)
    return results


def compute_metrics(results, method="codi"):
    if not results:
        raise ValidationError("no episode results to aggregate")
    succ = np.array([r.success for r in results], dtype=bool)
    times = np.array([r.completion_time for r in results if r.success])
    dists = np.array([r.min_goal_distance for r in results])
    steps = sum(r.steps for r in results)
    viol = sum(r.collision_violations for r in results)
    return MetricsTable(method=method, n_episodes=len(results), success_rate=float(succ.mean()),
                        median_completion_time=float(np.median(times)) if times.size else float("nan"),
                        median_min_distance=float(np.median(dists)),
                        collision_rate=float(viol / steps) if steps else 0.0)


# ---------------------------------------------------------------- oracle controller


class HandoffOracle:
    """Two scripted experts passing the object through the shared band.

    Used to check that the table is solvable before any learning.
    """

    def __init__(self, cfg, handoff=None):
        self.cfg = cfg
        self.handoff = np.asarray(handoff if handoff is not None else (0.5 * cfg.table[0], 0.6))
        self.name = "oracle"
        self.reset()

    def reset(self):
        self.left = ScriptedExpert(0, "pick", self.cfg, target=self.handoff)
        self.right = ScriptedExpert(1, "yield", self.cfg)

    def __call__(self, state, rng):
        cfg = self.cfg
        K = cfg.chunk_length
        out = np.zeros((2, K, ACTION_DIM))
        s = state
        for k in range(K):
            right_ready = reachable(s.obj, 1, cfg, 0.02) and s.held_by != 0 and \
                np.linalg.norm(s.grippers[0] - s.obj) > 0.3
            if right_ready and self.right.role == "yield":
                self.right = ScriptedExpert(1, "pick", cfg, target=np.asarray(cfg.goal))
            if s.held_by == 1 or right_ready:
                self.left = ScriptedExpert(0, "yield", cfg)
            cmd = np.stack([self.left.act(state_decompose(s, 0)), self.right.act(state_decompose(s, 1))])
            out[:, k] = cmd
            s = step_dynamics(s, cmd, cfg)
        return out
