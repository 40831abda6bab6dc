"""Comparison methods: classifier guidance with a learned noise-conditioned cost,
and three fine-tuning schemes (mirror descent, soft actor-critic style
reweighting, MPPI edit-and-distill).

The fine-tuning methods all train a residual network on top of a frozen base
score, starting from a zero head so the untrained residual model reproduces
the base exactly.
"""

import copy
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import (
    as_batch,
    broadcast_cond,
    check_positive,
    check_positive_int,
    check_random_state,
)
from .diffusion import NoiseSchedule, noise_time_sample
from .exceptions import (
    DimensionError,
    NotFittedError,
    NumericDivergenceError,
    TrainingDivergenceError,
    ValidationError,
)
from .mlp import MLP, Adam
from .score_net import ScoreMLP, TrainConfig, time_features

logger = logging.getLogger(__name__)


class DegenerateBatchWarning(RuntimeWarning):
    """Every importance weight in a fine-tuning batch vanished; the update was skipped."""


# ---------------------------------------------------------------- classifier guidance


class NoiseCondCostModel(RegressorMixin, BaseEstimator):
    """Regressor ``J_psi(s, a_t; t)`` of the clean-action cost from a noisy action.

    Inputs are preconditioned like :class:`ScoreMLP`; targets are standardized
    internally.
    """

    def __init__(self, hidden_sizes=(128, 128), activation="silu", n_time_freqs=3, batch_size=256,
                 step_count=3000, learning_rate=1e-3, schedule=None, random_state=0,
                 divergence_threshold=1e8):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.n_time_freqs = n_time_freqs
        self.batch_size = batch_size
        self.step_count = step_count
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.random_state = random_state
        self.divergence_threshold = divergence_threshold

    def _inputs(self, x, t, cond):
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,)) if np.ndim(t) else np.full(n, float(t))
        c = broadcast_cond(cond, n, self.cond_dim_)
        scale = 1.0 / np.sqrt(t * t + self.sigma_data_**2)
        return np.hstack([x * scale[:, None], time_features(t, self.n_time_freqs), c]), scale

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("NoiseCondCostModel is not fitted")

    def fit(self, X, y, cond=None):
        """Regress costs ``y`` of clean actions ``X`` from their noised versions."""
        X, _ = as_batch(X, name="X")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.shape[0] == 0 or y.shape[0] != X.shape[0]:
            raise DimensionError("X and y must be nonempty with one cost per row")
        if not np.all(np.isfinite(y)):
            raise ValidationError("costs must be finite")
        C = broadcast_cond(cond, X.shape[0])
        rng = check_random_state(self.random_state)
        self.n_features_in_, self.cond_dim_ = X.shape[1], C.shape[1]
        self.sigma_data_ = max(float(np.std(X)), 1e-3)
        self.schedule_ = self.schedule or NoiseSchedule.for_data(self.sigma_data_)
        self.y_mean_, self.y_scale_ = float(np.mean(y)), max(float(np.std(y)), 1e-12)
        n_in = X.shape[1] + 1 + 2 * self.n_time_freqs + C.shape[1]
        self.mlp_ = MLP([n_in, *self.hidden_sizes, 1], self.activation)
        params = self.mlp_.init_params(rng)
        opt = Adam(self.mlp_.n_params, self.learning_rate)
        z = (y - self.y_mean_) / self.y_scale_
        bs = check_positive_int(self.batch_size, "batch_size")
        steps = check_positive_int(self.step_count, "step_count")
        trace = np.empty(steps)
        for k in range(steps):
            idx = rng.integers(0, X.shape[0], size=bs)
            t = noise_time_sample(self.schedule_, rng, size=bs)
            x_t = X[idx] + t[:, None] * rng.standard_normal((bs, X.shape[1]))
            inp, _ = self._inputs(x_t, t, C[idx])
            out, cache = self.mlp_.forward(params, inp, return_cache=True)
            resid = out[:, 0] - z[idx]
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss) or loss > self.divergence_threshold:
                raise TrainingDivergenceError(f"cost-model loss {loss!r} diverged", step=k)
            params = opt.step(params, self.mlp_.backward(params, cache, (2.0 / bs) * resid[:, None]))
            trace[k] = loss
        self.params_ = params
        self.loss_trace_ = trace
        return self

    def predict(self, X, t=None, cond=None):
        """Predicted cost at noise time ``t`` (default: the smallest trained time)."""
        self._check_fitted()
        x, squeeze = as_batch(X, self.n_features_in_)
        t = self.schedule_.t_min if t is None else t
        inp, _ = self._inputs(x, t, cond)
        out = self.mlp_.forward(self.params_, inp)[:, 0] * self.y_scale_ + self.y_mean_
        return out[0] if squeeze else out

    def gradient(self, X, t, cond=None):
        """``d J_psi / d a_t`` by backpropagation."""
        self._check_fitted()
        x, squeeze = as_batch(X, self.n_features_in_)
        inp, scale = self._inputs(x, t, cond)
        g = self.mlp_.input_gradient(self.params_, inp)[:, : self.n_features_in_]
        g = g * scale[:, None] * self.y_scale_
        return g[0] if squeeze else g


def train_noise_cond_cost(dataset, cost, schedule=None, config=TrainConfig(), **model_kwargs):
    """Fit a :class:`NoiseCondCostModel` on a demonstration dataset.

    ``cost`` is either the array of clean-action costs (one per record) or a
    callable ``cost(states, actions) -> (D,)`` evaluated on the records.
    """
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    y = cost(dataset.states, dataset.actions) if callable(cost) else cost
    model = NoiseCondCostModel(batch_size=config.batch_size, step_count=config.step_count,
                               learning_rate=config.learning_rate, random_state=config.seed,
                               schedule=schedule or config.schedule,
                               divergence_threshold=config.divergence_threshold, **model_kwargs)
    return model.fit(dataset.actions, y, dataset.states)


def cg_guidance_score(costmodel, a_t, t, s, lam):
    """Classifier-guidance term ``-grad_{a_t} J_psi(s, a_t; t) / lam``.

    ``costmodel`` is anything with ``gradient(a_t, t, cond)``.
    """
    lam = check_positive(float(lam), "lam")
    g = -np.asarray(costmodel.gradient(a_t, t, s), dtype=np.float64) / lam
    if not np.all(np.isfinite(g)):
        raise NumericDivergenceError("non-finite cost-model gradient")
    return g


# ---------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    """Outer loop of the fine-tuning baselines.

    ``lam`` is the temperature used by every single step; ``states_per_step``
    states are drawn uniformly per step, each with ``rollouts_per_state``
    policy samples. ``candidates`` is the number of clean guesses per noisy
    anchor in the soft actor-critic step.
    """

    iterations: int = 5
    rollouts_per_state: int = 64
    lam: float = 1.0
    states_per_step: int = 16
    train: TrainConfig = field(default_factory=lambda: TrainConfig(step_count=500))
    sample_steps: Optional[int] = None
    candidates: int = 16

    def __post_init__(self):
        check_positive_int(self.iterations, "iterations")
        check_positive_int(self.candidates, "candidates")
        check_positive_int(self.rollouts_per_state, "rollouts_per_state")
        check_positive_int(self.states_per_step, "states_per_step")
        check_positive(self.lam, "lam")
        if self.sample_steps is not None:
            check_positive_int(self.sample_steps, "sample_steps")


@dataclass(frozen=True)
class EditPolicyConfig:
    perturbation_count: int = 64
    perturbation_cov: object = 0.05
    lam: float = 0.1

    def __post_init__(self):
        check_positive_int(self.perturbation_count, "perturbation_count")
        check_positive(self.lam, "lam")
        cov = np.asarray(self.perturbation_cov, dtype=np.float64)
        if np.any(~np.isfinite(cov)) or np.any(cov <= 0):
            raise ValidationError("perturbation covariance entries must be positive")


def residual_model(base, action_width, cond_dim=0, sigma_data=1.0, schedule=None, random_state=0, **kwargs):
    """Zero-initialized residual :class:`ScoreMLP` on top of a frozen ``base`` score."""
    model = ScoreMLP(base=base, schedule=schedule, random_state=random_state, warm_start=True, **kwargs)
    model._build(action_width, cond_dim, sigma_data, check_random_state(random_state))
    model.loss_trace_ = np.zeros(0)
    return model


def _as_trainable(model):
    if not isinstance(model, ScoreMLP) or model.base is None:
        raise ValidationError("fine-tuning needs a residual ScoreMLP (see residual_model)")
    model._check_fitted()
    return model


def _pick_states(states, n, rng):
    states = list(states)
    if not states:
        raise ValidationError("no states to fine-tune on")
    idx = rng.integers(0, len(states), size=n)
    return [states[i] for i in idx]


def _rollouts(model, states, featurize, config, rng):
    """Sample ``rollouts_per_state`` actions for every state from the (frozen) current model."""
    per_state = config.rollouts_per_state
    schedule = model.schedule_
    if config.sample_steps is not None:
        schedule = replace(schedule, n_steps=config.sample_steps)
    out = []
    for s in states:
        cond = featurize(s)
        a = model.sample(cond=cond, n_samples=per_state, rng=rng, schedule=schedule)
        out.append((s, broadcast_cond(cond, per_state, model.cond_dim_), a))
    return out


def _tilt_weights(costs, lam):
    """Per-state weights ``exp(-J/lam)`` scaled to mean one; ``None`` if they all vanish."""
    J = np.asarray(costs, dtype=np.float64)
    if np.any(np.isnan(J)):
        raise ValidationError("NaN cost")
    finite = np.isfinite(J)
    if not finite.any():
        return None
    z = -(J - J[finite].min()) / lam
    w = np.exp(z)
    if not np.isfinite(w).all() or w.sum() <= 0:
        return None
    return w / w.mean()


def _updated(model, train, rng):
    new = copy.deepcopy(model)
    new.set_params(batch_size=train.batch_size, step_count=train.step_count,
                   learning_rate=train.learning_rate, warm_start=True,
                   random_state=int(rng.integers(0, 2**31 - 1)))
    return new


def _none(_s):
    return None


def dpmd_finetune_step(model, states, cost, lam, rng, config=FinetuneConfig(), featurize=_none):
    """One mirror-descent step: fit ``pi_new ~ pi_old exp(-J/lam)`` by weighted DSM.

    Rollouts come from ``model`` before the update. States whose weights all
    vanish are dropped with a :class:`DegenerateBatchWarning`; if none remain
    the model is returned unchanged.
    """
    model = _as_trainable(model)
    lam = check_positive(float(lam), "lam")
    rng = check_random_state(rng)
    picked = _pick_states(states, config.states_per_step, rng)
    A, C, W = [], [], []
    for s, c, a in _rollouts(model, picked, featurize, config, rng):
        w = _tilt_weights(cost(s, a), lam)
        if w is None:
            warnings.warn("all mirror-descent weights vanished for a state", DegenerateBatchWarning)
            continue
        A.append(a)
        C.append(c)
        W.append(w)
    if not A:
        return model
    new = _updated(model, config.train, rng)
    return new.fit(np.vstack(A), np.vstack(C), sample_weight=np.concatenate(W))


def sdac_finetune_step(model, states, cost, lam, schedule=None, rng=None, config=FinetuneConfig(),
                       featurize=_none, candidates=None, control_variate=True):
    """One reweighted score-matching step toward the soft-optimal ``exp(-J/lam)``.

    Noisy anchors ``a_t`` come from forward-corrupted rollouts of ``model``
    (same noise time for corruption and loss). For each anchor,
    ``candidates`` (default ``config.candidates``) clean guesses ``a_t - t * eps`` are weighted by
    ``exp(-J/lam)`` (scaled to mean one per anchor) and the model regresses
    ``||t^2 s(a_t) + t * eps||^2`` under those weights.

    With ``control_variate`` the candidates of an anchor are collapsed into
    one target ``eps_hat = mean((w - 1) * eps)``. It has the same expected
    minimizer but far less variance at small ``t``, where the weights are
    nearly uniform.
    """
    model = _as_trainable(model)
    lam = check_positive(float(lam), "lam")
    rng = check_random_state(rng)
    schedule = schedule or model.schedule_
    candidates = check_positive_int(candidates or config.candidates, "candidates")
    picked = _pick_states(states, config.states_per_step, rng)
    X, T, E, C, W = [], [], [], [], []
    for s, c, a in _rollouts(model, picked, featurize, config, rng):
        n, d = a.shape
        t = noise_time_sample(schedule, rng, size=n)
        a_t = a + t[:, None] * rng.standard_normal((n, d))
        eps = rng.standard_normal((n, candidates, d))
        clean = a_t[:, None, :] - t[:, None, None] * eps
        J = np.asarray(cost(s, clean.reshape(n * candidates, d)), dtype=np.float64).reshape(n, candidates)
        w = np.empty_like(J)
        keep = np.ones(n, dtype=bool)
        for j in range(n):
            wj = _tilt_weights(J[j], lam)
            if wj is None:
                keep[j] = False
            else:
                w[j] = wj
        if not keep.any():
            warnings.warn("all soft-optimal weights vanished for a state", DegenerateBatchWarning)
            continue
        if control_variate:
            e_hat = np.mean((w[keep] - 1.0)[:, :, None] * eps[keep], axis=1)
            X.append(a_t[keep] - t[keep][:, None] * e_hat)
            T.append(t[keep])
            E.append(e_hat)
            C.append(c[keep])
            W.append(np.ones(int(keep.sum())))
        else:
            X.append(clean[keep].reshape(-1, d))
            T.append(np.repeat(t[keep], candidates))
            E.append(eps[keep].reshape(-1, d))
            C.append(np.repeat(c[keep], candidates, axis=0))
            W.append(w[keep].reshape(-1))
    if not X:
        return model
    new = _updated(model, config.train, rng)
    return new.fit_tuples(np.vstack(X), np.concatenate(T), np.vstack(E), np.vstack(C),
                          sample_weight=np.concatenate(W))


@dataclass(frozen=True)
class EditResult:
    edited: np.ndarray
    perturbations: np.ndarray
    weights: np.ndarray
    costs: np.ndarray


def expo_edit(a, s, cost, cfg, rng, return_details=False):
    """MPPI edit ``a + sum_i w_i d_i`` with ``d_i ~ N(0, Sigma)``, ``w = softmax(-J(s, a + d)/lam)``.

    ``a`` may be one chunk ``(d,)`` or a batch ``(n, d)`` (edited independently,
    with one batched cost call).
    """
    rng = check_random_state(rng)
    x, squeeze = as_batch(a, name="a")
    n, d = x.shape
    M = cfg.perturbation_count
    sd = np.sqrt(np.broadcast_to(np.asarray(cfg.perturbation_cov, dtype=np.float64), (d,)))
    pert = sd * rng.standard_normal((n, M, d))
    J = np.asarray(cost(s, (x[:, None, :] + pert).reshape(n * M, d)), dtype=np.float64).reshape(n, M)
    if np.any(np.isnan(J)):
        raise ValidationError("NaN cost")
    z = -(J - J.min(axis=1, keepdims=True)) / cfg.lam
    w = np.exp(z)
    w /= w.sum(axis=1, keepdims=True)
    edited = x + np.einsum("nm,nmd->nd", w, pert)
    if squeeze:
        edited, pert, w, J = edited[0], pert[0], w[0], J[0]
    return EditResult(edited, pert, w, J) if return_details else edited


def expo_distill_step(model, states, cost, edit_cfg, rng, config=FinetuneConfig(), featurize=_none):
    """Sample from ``model``, edit every sample with :func:`expo_edit`, refit by DSM on the edits."""
    model = _as_trainable(model)
    rng = check_random_state(rng)
    picked = _pick_states(states, config.states_per_step, rng)
    A, C = [], []
    for s, c, a in _rollouts(model, picked, featurize, config, rng):
        A.append(expo_edit(a, s, cost, edit_cfg, rng))
        C.append(c)
    new = _updated(model, config.train, rng)
    return new.fit(np.vstack(A), np.vstack(C))


def finetune(method, model, states, cost, config=FinetuneConfig(), rng=None, featurize=_none,
             edit_cfg=None, schedule=None):
    """Run ``config.iterations`` steps of ``dpmd``, ``sdac`` or ``expo``."""
    rng = check_random_state(rng)
    for k in range(config.iterations):
        if method == "dpmd":
            model = dpmd_finetune_step(model, states, cost, config.lam, rng, config, featurize)
        elif method == "sdac":
            model = sdac_finetune_step(model, states, cost, config.lam, schedule, rng, config, featurize)
        elif method == "expo":
            model = expo_distill_step(model, states, cost, edit_cfg or EditPolicyConfig(lam=config.lam),
                                      rng, config, featurize)
        else:
            raise ValidationError(f"unknown fine-tuning method {method!r}")
        logger.info("%s iteration %d done", method, k)
    return model
