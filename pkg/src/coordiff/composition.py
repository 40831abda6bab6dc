"""Composing single-agent score models into a cost-guided joint sampler.

The joint score at noise time ``t`` is the stacked per-agent score plus a
guidance term estimated without gradients of the cost:

    g(a_t) ~= 1/M sum_m w_m (a_m - a_t) / t^2,    a_m ~ N(mu, Sigma)
    w_m = exp(-J(s, a_m) / lam) / mean_k exp(-J(s, a_k) / lam) - 1

where ``mu = a_t + t^2 score(a_t)`` and ``Sigma = t^2 I`` (optionally
``+ t^4 diag(d score / d a_t)``).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._validation import as_batch, check_positive, check_positive_int, check_random_state
from .diffusion import reverse_sde_sample
from .exceptions import DegenerateWeightsError, DimensionError, NumericDivergenceError, ValidationError

# Floor on posterior variances relative to t^2 when the Jacobian correction is on.
_COV_FLOOR = 1e-6


@dataclass(frozen=True)
class ProductPolicy:
    """Independent per-agent score models over a block-structured joint action.

    ``decomposers[i](state)`` returns agent ``i``'s conditioning vector (or
    ``None``); ``widths[i]`` is its action-chunk width.
    """

    agent_models: Sequence[Callable]
    decomposers: Sequence[Callable]
    widths: Sequence[int]

    def __post_init__(self):
        if not (len(self.agent_models) == len(self.decomposers) == len(self.widths)):
            raise DimensionError("agent_models, decomposers and widths must have equal length")
        if len(self.widths) == 0:
            raise ValidationError("a product policy needs at least one agent")
        for w in self.widths:
            check_positive_int(w, "width")

    @property
    def n_agents(self):
        return len(self.widths)

    @property
    def joint_width(self):
        return int(sum(self.widths))

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.widths)]).astype(int)

    def blocks(self):
        off = self.offsets
        return [slice(off[i], off[i + 1]) for i in range(self.n_agents)]

    def conditions(self, state):
        return [dec(state) for dec in self.decomposers]


def independent_policy(models, widths, decomposers=None):
    """Product policy whose agents ignore the state."""
    decomposers = decomposers or [(lambda s: None)] * len(models)
    return ProductPolicy(list(models), list(decomposers), [int(w) for w in widths])


@dataclass(frozen=True)
class ReflectedScore:
    """Score of ``P a`` where ``P = diag(signs)``, given the score of ``a``.

    Lets one shared policy serve mirror-image agents: the conditioning is
    mirrored by the caller, the action axis flips here.
    """

    field: Callable
    signs: np.ndarray

    def __call__(self, x, t, cond=None):
        signs = np.asarray(self.signs, dtype=np.float64)
        return signs * self.field(np.asarray(x) * signs, t, cond)

    def jacobian_diag(self, x, t, cond=None):
        signs = np.asarray(self.signs, dtype=np.float64)
        return _jacobian_diag(self.field, np.asarray(x) * signs, t, cond)


@dataclass(frozen=True)
class GuidanceConfig:
    """Coupling side of the composed policy.

    ``cost(state, actions (B, D))`` returns ``(B,)`` joint costs, or
    ``(B, n_agents)`` when ``per_agent`` is set (each agent's block is then
    guided by its own column).
    """

    lam: float = 0.1
    mc_samples: int = 64
    cost: Optional[Callable] = None
    enabled: bool = True
    jacobian: bool = False
    per_agent: bool = False

    def __post_init__(self):
        check_positive(self.lam, "lam")
        check_positive_int(self.mc_samples, "mc_samples")
        if self.enabled and self.cost is None:
            raise ValidationError("guidance is enabled but no cost was given")


@dataclass(frozen=True)
class TweediePosterior:
    mean: np.ndarray
    cov_diag: np.ndarray


@dataclass(frozen=True)
class GuidanceWeights:
    weights: np.ndarray
    log_mu_w: np.ndarray

    @property
    def mu_w(self):
        return np.exp(self.log_mu_w)


def product_score(policy, a_t, t, s=None):
    """Stack per-agent scores ``s_i(a_t[block_i]; t, sigma_i(s))`` in agent order."""
    x, squeeze = as_batch(a_t, policy.joint_width, name="a_t")
    out = np.empty_like(x)
    for model, cond, blk in zip(policy.agent_models, policy.conditions(s), policy.blocks()):
        sc = np.asarray(model(x[:, blk], t, cond), dtype=np.float64)
        if sc.shape != (x.shape[0], blk.stop - blk.start):
            raise DimensionError(f"agent score returned shape {sc.shape}")
        out[:, blk] = sc
    return out[0] if squeeze else out


def _jacobian_diag(field, x, t, cond, h=1e-5):
    if hasattr(field, "jacobian_diag"):
        return np.asarray(field.jacobian_diag(x, t, cond), dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        out[:, j] = (field(x + e, t, cond)[:, j] - field(x - e, t, cond)[:, j]) / (2 * h)
    return out


def tweedie_posterior(policy, a_t, t, s=None, jacobian=False, score=None):
    """Gaussian approximation of ``p(a | a_t)`` from the product score.

    ``score`` may pass a precomputed product score to avoid a second evaluation.
    """
    t = check_positive(float(t), "t")
    x, squeeze = as_batch(a_t, policy.joint_width, name="a_t")
    sc = product_score(policy, x, t, s) if score is None else np.asarray(score)
    if not np.all(np.isfinite(sc)):
        raise NumericDivergenceError("non-finite score in posterior")
    t2 = t * t
    mean = x + t2 * sc
    if jacobian:
        jac = np.empty_like(x)
        for model, cond, blk in zip(policy.agent_models, policy.conditions(s), policy.blocks()):
            jac[:, blk] = _jacobian_diag(model, x[:, blk], t, cond)
        cov = np.maximum(t2 + t2 * t2 * jac, _COV_FLOOR * t2)
    else:
        cov = np.full_like(x, t2)
    if squeeze:
        return TweediePosterior(mean[0], cov[0])
    return TweediePosterior(mean, cov)


def codi_weights(costs, lam):
    """Centered importance weights along the last axis, computed in log space.

    ``w_m = exp(-J_m / lam) / mu_w - 1`` with ``mu_w`` the sample mean of the
    exponentials, so ``sum_m w_m = 0``. Infinite costs get weight ``-1``.
    """
    lam = check_positive(float(lam), "lam")
    J = np.asarray(costs, dtype=np.float64)
    if J.ndim == 0 or J.shape[-1] == 0:
        raise ValidationError("need at least one cost evaluation")
    if np.any(np.isnan(J)) or np.any(J == -np.inf):
        raise ValidationError("costs must be finite or +inf")
    j_min = np.min(J, axis=-1, keepdims=True)
    if np.any(~np.isfinite(j_min)):
        raise DegenerateWeightsError("every cost is +inf; weights are undefined")
    z = np.exp(-(J - j_min) / lam)
    mean_z = np.mean(z, axis=-1, keepdims=True)
    w = z / mean_z - 1.0
    log_mu = np.log(mean_z[..., 0]) - j_min[..., 0] / lam
    return GuidanceWeights(weights=w, log_mu_w=log_mu)


def codi_guidance_score(policy, a_t, t, s, cfg, rng, score=None):
    """Monte-Carlo guidance score from ``cfg.mc_samples`` posterior draws.

    Cost evaluations for all draws of all batch rows go through one call.
    """
    rng = check_random_state(rng)
    t = check_positive(float(t), "t")
    M = check_positive_int(cfg.mc_samples, "mc_samples")
    x, squeeze = as_batch(a_t, policy.joint_width, name="a_t")
    n, D = x.shape
    post = tweedie_posterior(policy, x, t, s, jacobian=cfg.jacobian, score=score)
    draws = post.mean[:, None, :] + np.sqrt(post.cov_diag)[:, None, :] * rng.standard_normal((n, M, D))
    costs = np.asarray(cfg.cost(s, draws.reshape(n * M, D)), dtype=np.float64)
    delta = (draws - x[:, None, :]) / (t * t)
    if cfg.per_agent:
        costs = costs.reshape(n, M, policy.n_agents)
        g = np.empty_like(x)
        for i, blk in enumerate(policy.blocks()):
            w = codi_weights(costs[:, :, i], cfg.lam).weights
            g[:, blk] = np.mean(w[:, :, None] * delta[:, :, blk], axis=1)
    else:
        w = codi_weights(costs.reshape(n, M), cfg.lam).weights
        g = np.mean(w[:, :, None] * delta, axis=1)
    return g[0] if squeeze else g


class ComposedScore:
    """Product score plus (optional) guidance at a fixed joint state."""

    def __init__(self, policy, state, cfg, rng):
        self.policy, self.state, self.cfg = policy, state, cfg
        self.rng = check_random_state(rng)

    def __call__(self, x, t, cond=None):
        sc = product_score(self.policy, x, t, self.state)
        if self.cfg is None or not self.cfg.enabled:
            return sc
        return sc + codi_guidance_score(self.policy, x, t, self.state, self.cfg, self.rng, score=sc)


def codi_sample(policy, s, cfg, schedule, rng, n_samples=None, guidance_field=None):
    """Sample joint action chunks from the guided product policy.

    Integrator noise and guidance draws use separate child streams, so
    switching guidance on with a constant cost reproduces the unguided run
    bit for bit. ``guidance_field(x, t)`` replaces the Monte-Carlo estimator
    (used for gradient-based guidance baselines).
    """
    rng = check_random_state(rng)
    sde_seed, guide_seed = rng.integers(0, 2**63 - 1, size=2)
    composed = ComposedScore(policy, s, cfg, guide_seed)
    field = composed
    if guidance_field is not None:
        def field(x, t, cond=None):
            return product_score(policy, x, t, s) + guidance_field(x, t)
    return reverse_sde_sample(field, schedule, None, np.random.default_rng(sde_seed),
                              dim=policy.joint_width, n_samples=n_samples)
