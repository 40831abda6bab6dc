"""Planar two-gripper hand-off table.

Point grippers move on a ``1.8 x 1.2`` m table, each confined to a reach disk
that covers only part of it, so an object spawned on the left has to be passed
to the right-hand gripper before it can reach the goal.

Joint action chunks are arrays of shape ``(n_agents, K, 3)`` holding per-step
``(vx, vy, grip)`` commands; ``grip > 0`` means "closed". Every dynamics
function also has a batched form over a leading axis, which the cost uses to
roll out many candidate chunks at once.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from ._validation import check_positive, check_positive_int, check_random_state
from .exceptions import DimensionError, ValidationError

ACTION_DIM = 3
NO_HOLDER = -1


@dataclass(frozen=True)
class EnvConfig:
    """Geometry and timing of the table.

    ``contact_radius`` is the closest two grippers can get: a move that would
    bring them nearer is cancelled and any held object is knocked loose (it
    cannot be grabbed again during that step).
    """

    table: Tuple[float, float] = (1.8, 1.2)
    reach_centers: Tuple[Tuple[float, float], ...] = ((0.0, 0.6), (1.8, 0.6))
    reach_radius: Tuple[float, ...] = (1.1, 1.1)
    grasp_radius: float = 0.05
    contact_radius: float = 0.08
    dt: float = 0.1
    v_max: float = 1.0
    goal: Tuple[float, float] = (1.6, 0.6)
    goal_tolerance: float = 0.15
    reset_probability: float = 0.01
    chunk_length: int = 16

    def __post_init__(self):
        for name in ("grasp_radius", "dt", "v_max", "goal_tolerance"):
            check_positive(float(getattr(self, name)), name)
        check_positive(float(self.contact_radius), "contact_radius", strict=False)
        check_positive_int(self.chunk_length, "chunk_length")
        if not 0.0 <= self.reset_probability <= 1.0:
            raise ValidationError("reset_probability must lie in [0, 1]")
        if len(self.reach_centers) != len(self.reach_radius) or not self.reach_radius:
            raise DimensionError("one reach radius per reach center")
        for r in self.reach_radius:
            if not 0 < r < self.table[0]:
                raise ValidationError("every reach radius must be positive and below the table width")

    @property
    def n_agents(self):
        return len(self.reach_radius)

    @property
    def home(self):
        """Rest pose of each gripper (the center of its reach disk)."""
        return np.asarray(self.reach_centers, dtype=np.float64)

    @property
    def chunk_width(self):
        return self.chunk_length * ACTION_DIM


@dataclass(frozen=True)
class CostSpec:
    """Thresholds (meters) and weights of the coordination cost.

    ``variant`` is ``"hinged"`` (every term hinged at zero) or
    ``"plain"`` (plain goal and engage distances, 0/1 collision flag).
    ``goal_only`` keeps only the goal term; ``independent`` makes the cost
    per-agent: no collision term, engagement for every agent, and each agent's
    chunk is rolled out with the other agents holding still.
    """

    goal_threshold: float = 0.01
    goal_weight: float = 1.0
    engage_threshold: float = 0.20
    engage_weight: float = 10.0
    collision_threshold: float = 0.30
    collision_weight: float = 10.0
    variant: str = "hinged"
    goal_only: bool = False
    independent: bool = False

    def __post_init__(self):
        for name in ("goal_threshold", "engage_threshold", "collision_threshold"):
            check_positive(float(getattr(self, name)), name)
        for name in ("goal_weight", "engage_weight", "collision_weight"):
            check_positive(float(getattr(self, name)), name, strict=False)
        if self.variant not in ("hinged", "plain"):
            raise ValidationError(f"unknown cost variant {self.variant!r}")


@dataclass(frozen=True)
class WorldState:
    grippers: np.ndarray
    closed: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    held_by: int = NO_HOLDER

    def __post_init__(self):
        g = np.array(self.grippers, dtype=np.float64).reshape(-1, 2)
        c = np.array(self.closed, dtype=bool).reshape(-1)
        if c.shape[0] != g.shape[0]:
            raise DimensionError("one gripper flag per gripper")
        obj = np.array(self.obj, dtype=np.float64).reshape(2)
        held = int(self.held_by)
        if not NO_HOLDER <= held < g.shape[0]:
            raise ValidationError(f"held_by={held} is not an agent index")
        if held != NO_HOLDER:
            obj = g[held].copy()
        object.__setattr__(self, "grippers", g)
        object.__setattr__(self, "closed", c)
        object.__setattr__(self, "obj", obj)
        object.__setattr__(self, "goal", np.array(self.goal, dtype=np.float64).reshape(2))
        object.__setattr__(self, "held_by", held)

    @property
    def n_agents(self):
        return self.grippers.shape[0]

    def to_dict(self):
        return {"grippers": self.grippers.tolist(), "closed": self.closed.tolist(),
                "obj": self.obj.tolist(), "goal": self.goal.tolist(), "held_by": self.held_by}

    @classmethod
    def from_dict(cls, d):
        return cls(d["grippers"], d["closed"], d["obj"], d["goal"], d["held_by"])

    def same_as(self, other):
        return (self.held_by == other.held_by and np.array_equal(self.grippers, other.grippers)
                and np.array_equal(self.closed, other.closed) and np.array_equal(self.obj, other.obj)
                and np.array_equal(self.goal, other.goal))


def initial_state(cfg, obj, grippers=None):
    """Grippers open at home (unless given), object free at ``obj``."""
    g = cfg.home.copy() if grippers is None else grippers
    return WorldState(g, np.zeros(cfg.n_agents, dtype=bool), obj, cfg.goal)


@dataclass(frozen=True)
class AgentView:
    """What agent ``agent`` observes: itself, the object and the goal."""

    agent: int
    ego: np.ndarray
    ego_closed: bool
    obj: np.ndarray
    goal: np.ndarray


def state_decompose(state, i):
    if isinstance(i, bool) or not isinstance(i, (int, np.integer)) or not 0 <= i < state.n_agents:
        raise ValidationError(f"agent index {i!r} out of range for {state.n_agents} agents")
    return AgentView(int(i), state.grippers[i].copy(), bool(state.closed[i]),
                     state.obj.copy(), state.goal.copy())


def mirror_x(cfg):
    """Whether agent ``i`` sees the table mirrored left-to-right (right-hand agents)."""
    return [c[0] > 0.5 * cfg.table[0] for c in cfg.reach_centers]


def view_features(view, cfg, mirrored=None):
    """Policy conditioning ``[ego_x, ego_y, ego_closed, obj_x, obj_y]``.

    Right-hand agents are reflected into the left-hand frame so that one
    policy serves both. The goal is not part of the features.
    """
    if mirrored is None:
        mirrored = mirror_x(cfg)[view.agent]
    ego, obj = view.ego.copy(), view.obj.copy()
    if mirrored:
        ego[0] = cfg.table[0] - ego[0]
        obj[0] = cfg.table[0] - obj[0]
    return np.array([ego[0], ego[1], float(view.ego_closed), obj[0], obj[1]])


def action_signs(cfg, mirrored):
    """Elementwise sign flip taking a chunk between world and mirrored frames."""
    step = np.array([-1.0, 1.0, 1.0]) if mirrored else np.ones(ACTION_DIM)
    return np.tile(step, cfg.chunk_length)


# ---------------------------------------------------------------- dynamics


def _clip_speed(vel, v_max):
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    scale = np.minimum(1.0, v_max / np.maximum(speed, 1e-300))
    return vel * scale


def _project(pos, cfg):
    centers = cfg.home
    radius = np.asarray(cfg.reach_radius)[:, None]
    d = pos - centers
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    pos = np.where(r > radius, centers + d * (radius / np.maximum(r, 1e-300)), pos)
    # the disk centers sit on the table, so clamping to the box keeps points in the disk
    return np.clip(pos, 0.0, np.asarray(cfg.table))


def step_batch(grippers, closed, obj, held, vel, grip, cfg):
    """One step for a batch: ``grippers (B, N, 2)``, ``closed (B, N)``, ``obj (B, 2)``,
    ``held (B,)``, ``vel (B, N, 2)``, ``grip (B, N)``. Returns new arrays."""
    B, N = closed.shape
    rows = np.arange(B)
    vel = _clip_speed(np.asarray(vel, dtype=np.float64), cfg.v_max)
    new = _project(grippers + cfg.dt * vel, cfg)
    held = held.copy()
    bump = np.zeros(B, dtype=bool)
    if N == 2 and cfg.contact_radius > 0:
        d_new = np.linalg.norm(new[:, 0] - new[:, 1], axis=-1)
        d_old = np.linalg.norm(grippers[:, 0] - grippers[:, 1], axis=-1)
        bump = (d_new < cfg.contact_radius) & (d_new < d_old)
        new = np.where(bump[:, None, None], grippers, new)
        held[bump] = NO_HOLDER
    closed = np.asarray(grip) > 0
    carried = held >= 0
    # the object travels with its holder, then the gripper flags are applied
    obj = np.where(carried[:, None], new[rows, np.maximum(held, 0)], obj)
    released = carried & ~closed[rows, np.maximum(held, 0)]
    held[released] = NO_HOLDER
    for i in range(N):
        near = np.linalg.norm(new[:, i] - obj, axis=-1) <= cfg.grasp_radius
        take = (held == NO_HOLDER) & closed[:, i] & near & ~bump
        held[take] = i
    obj = np.where((held >= 0)[:, None], new[rows, np.maximum(held, 0)], obj)
    return new, closed, obj, held


def _split_command(command, n_agents):
    c = np.asarray(command, dtype=np.float64)
    if c.shape != (n_agents, ACTION_DIM):
        raise DimensionError(f"step command must be ({n_agents}, {ACTION_DIM}), got {c.shape}")
    return c[None, :, :2], c[None, :, 2]


def step_dynamics(state, command, cfg):
    """Advance one ``dt``. ``command`` is ``(n_agents, 3)`` rows of ``(vx, vy, grip)``.

    Speeds above ``v_max`` are scaled down; positions are clamped to the
    table and the reach disks. A closed gripper within ``grasp_radius`` of a
    free object picks it up (lower agent index first); opening releases it.
    """
    vel, grip = _split_command(command, state.n_agents)
    g, c, o, h = step_batch(state.grippers[None], state.closed[None], state.obj[None],
                            np.array([state.held_by]), vel, grip, cfg)
    return WorldState(g[0], c[0], o[0], state.goal, int(h[0]))


def as_joint_chunk(actions, cfg, n_agents=None):
    """Reshape flat per-agent chunks ``(N, K*3)`` or ``(N*K*3,)`` to ``(N, K, 3)``."""
    n_agents = n_agents or cfg.n_agents
    a = np.asarray(actions, dtype=np.float64)
    if a.size != n_agents * cfg.chunk_width:
        raise DimensionError(f"expected {n_agents * cfg.chunk_width} action values, got {a.size}")
    return a.reshape(n_agents, cfg.chunk_length, ACTION_DIM)


def rollout_chunk(state, chunk, cfg, n_steps=None):
    """Apply the chunk step by step; returns the ``K + 1`` visited states."""
    chunk = as_joint_chunk(chunk, cfg, state.n_agents)
    n_steps = cfg.chunk_length if n_steps is None else n_steps
    traj = [state]
    for k in range(n_steps):
        traj.append(step_dynamics(traj[-1], chunk[:, k], cfg))
    return traj


@dataclass(frozen=True)
class BatchTrajectory:
    grippers: np.ndarray  # (B, K+1, N, 2)
    obj: np.ndarray  # (B, K+1, 2)
    held: np.ndarray  # (B, K+1)


def rollout_batch(state, chunks, cfg):
    """Roll out ``B`` joint chunks ``(B, N, K, 3)`` (or flat ``(B, N*K*3)``) from one state."""
    N, K = state.n_agents, cfg.chunk_length
    a = np.asarray(chunks, dtype=np.float64).reshape(-1, N, K, ACTION_DIM)
    B = a.shape[0]
    g = np.broadcast_to(state.grippers, (B, N, 2)).copy()
    c = np.broadcast_to(state.closed, (B, N)).copy()
    o = np.broadcast_to(state.obj, (B, 2)).copy()
    h = np.full(B, state.held_by)
    gs, os_, hs = [g], [o], [h]
    for k in range(K):
        g, c, o, h = step_batch(g, c, o, h, a[:, :, k, :2], a[:, :, k, 2], cfg)
        gs.append(g)
        os_.append(o)
        hs.append(h)
    return BatchTrajectory(np.stack(gs, 1), np.stack(os_, 1), np.stack(hs, 1))


# ---------------------------------------------------------------- cost


def _d_t2p(path, point):
    return np.min(np.linalg.norm(path[:, 1:] - point, axis=-1), axis=1)


def _d_t2t(path_a, path_b):
    return np.min(np.linalg.norm(path_a[:, 1:] - path_b[:, 1:], axis=-1), axis=1)


def _cost_terms(state, traj, spec, engage_agents):
    """Unweighted ``(goal, collision, engage)`` terms, each ``(B,)``."""
    hinged = spec.variant == "hinged"
    d_goal = _d_t2p(traj.obj, state.goal)
    goal = np.minimum(d_goal - spec.goal_threshold, 0.0) if hinged else d_goal
    if traj.grippers.shape[2] >= 2:
        d_pair = _d_t2t(traj.grippers[:, :, 0], traj.grippers[:, :, 1])
        if hinged:
            collision = np.minimum(spec.collision_threshold - d_pair, 0.0)
        else:
            collision = (d_pair < spec.collision_threshold).astype(np.float64)
    else:
        collision = np.zeros_like(goal)
    engage = np.zeros_like(goal)
    for i in engage_agents:
        d = _d_t2t(traj.grippers[:, :, i], traj.obj)
        engage += np.minimum(d - spec.engage_threshold, 0.0) if hinged else d
    return goal, collision, engage


def closer_agent(state):
    """Agent nearest the object in ``state`` (ties go to the lower index)."""
    return int(np.argmin(np.linalg.norm(state.grippers - state.obj, axis=-1)))


def evaluate_cost_batch(state, chunks, spec, cfg, return_terms=False):
    """Cost of ``B`` candidate joint chunks from ``state``.

    Returns ``(B,)`` totals, or ``(B, N)`` per-agent totals when
    ``spec.independent`` is set. With ``return_terms`` also returns the
    unweighted ``(goal, collision, engage)`` terms of the joint rollout.
    """
    N, K = state.n_agents, cfg.chunk_length
    a = np.asarray(chunks, dtype=np.float64).reshape(-1, N, K, ACTION_DIM)
    if spec.independent:
        out = np.empty((a.shape[0], N))
        for i in range(N):
            solo = np.zeros_like(a)
            solo[:, :, :, 2] = np.where(state.closed, 1.0, -1.0)[None, :, None]
            solo[:, i] = a[:, i]
            traj = rollout_batch(state, solo, cfg)
            goal, _, engage = _cost_terms(state, traj, spec, [i])
            out[:, i] = spec.goal_weight * goal + (0.0 if spec.goal_only else spec.engage_weight * engage)
        return out
    traj = rollout_batch(state, a, cfg)
    goal, collision, engage = _cost_terms(state, traj, spec, [closer_agent(state)])
    if spec.goal_only:
        collision, engage = np.zeros_like(goal), np.zeros_like(goal)
    total = spec.goal_weight * goal + spec.collision_weight * collision + spec.engage_weight * engage
    return (total, (goal, collision, engage)) if return_terms else total


def evaluate_cost(state, chunk, spec, cfg):
    """Total cost and ``{"goal", "collision", "engage"}`` unweighted terms of one joint chunk."""
    if spec.independent:
        return evaluate_cost_batch(state, chunk, spec, cfg)[0], {}
    total, (g, c, e) = evaluate_cost_batch(state, chunk, spec, cfg, return_terms=True)
    return float(total[0]), {"goal": float(g[0]), "collision": float(c[0]), "engage": float(e[0])}


# ---------------------------------------------------------------- scripted expert

_GAIN = 4.0


def _toward(pos, target, cfg):
    return _clip_speed(_GAIN * (np.asarray(target) - pos), cfg.v_max)


def nearest_reachable(point, agent, cfg):
    p = np.asarray(point, dtype=np.float64)[None]
    centers = cfg.home[agent:agent + 1]
    d = p - centers
    r = np.linalg.norm(d)
    radius = cfg.reach_radius[agent]
    if r > radius:
        p = centers + d * (radius / r)
    return np.clip(p, 0.0, np.asarray(cfg.table))[0]


def reachable(point, agent, cfg, margin=0.0):
    d = np.linalg.norm(np.asarray(point) - cfg.home[agent])
    return d <= cfg.reach_radius[agent] - margin


@dataclass
class ScriptedExpert:
    """Proportional controller for one agent.

    ``pick`` approaches the object, closes, carries it to ``target``, opens
    and returns home. ``yield`` returns home with the gripper open.
    """

    agent: int
    role: str
    cfg: EnvConfig
    target: Optional[np.ndarray] = None
    phase: str = field(default="approach")

    def __post_init__(self):
        if self.role not in ("pick", "yield"):
            raise ValidationError(f"unknown role {self.role!r}")
        if self.role == "yield":
            self.phase = "home"

    def act(self, view):
        cfg = self.cfg
        ego, obj = view.ego, view.obj
        home = cfg.home[self.agent]
        holding = view.ego_closed and np.linalg.norm(ego - obj) < 1e-9
        if self.phase == "carry" and not holding:
            self.phase = "approach"
        if self.phase == "approach" and holding:
            self.phase = "carry"
        if self.phase == "approach":
            goal_pt = nearest_reachable(obj, self.agent, cfg)
            v = _toward(ego, goal_pt, cfg)
            close = np.linalg.norm(ego + cfg.dt * v - obj) <= 0.5 * cfg.grasp_radius
            return np.array([v[0], v[1], 1.0 if close else -1.0])
        if self.phase == "carry":
            v = _toward(ego, self.target, cfg)
            if np.linalg.norm(ego - self.target) <= 0.005:
                self.phase = "home"
                return np.array([0.0, 0.0, -1.0])
            return np.array([v[0], v[1], 1.0])
        v = _toward(ego, home, cfg)
        return np.array([v[0], v[1], -1.0])


def scripted_expert_action(view, role, cfg, rng=None, target=None):
    """Chunk of ``K`` expert commands for a lone agent starting from ``view``.

    The expert is rolled forward on a single-agent copy of the table; ``pick``
    uses ``target`` as placement point (sampled in the reach disk if omitted).
    """
    rng = check_random_state(rng)
    i = view.agent
    if target is None:
        target = sample_in_reach(i, cfg, rng)
    expert = ScriptedExpert(i, role, cfg, target=np.asarray(target, dtype=np.float64))
    solo = replace(cfg, reach_centers=(cfg.reach_centers[i],), reach_radius=(cfg.reach_radius[i],))
    state = WorldState(view.ego[None], [view.ego_closed], view.obj, view.goal,
                       0 if view.ego_closed and np.linalg.norm(view.ego - view.obj) <= cfg.grasp_radius else NO_HOLDER)
    out = np.empty((cfg.chunk_length, ACTION_DIM))
    for k in range(cfg.chunk_length):
        cmd = expert.act(_view_as(state, i))
        out[k] = cmd
        state = step_dynamics(state, cmd[None], solo)
    return out


def _view_as(solo_state, agent):
    v = state_decompose(solo_state, 0)
    return AgentView(agent, v.ego, v.ego_closed, v.obj, v.goal)


def sample_in_reach(agent, cfg, rng, margin=0.05):
    """Uniform point of the table inside ``agent``'s reach disk (minus ``margin``)."""
    rng = check_random_state(rng)
    lo = np.full(2, margin)
    hi = np.asarray(cfg.table) - margin
    while True:
        p = rng.uniform(lo, hi)
        if reachable(p, agent, cfg, margin):
            return p
