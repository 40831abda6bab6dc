"""MLP score model trained by denoising score matching.

The network sees ``concat(x / sqrt(t^2 + sigma_data^2), time features, cond)``
and its head is divided by ``t``, so the returned value is the score itself
while the raw outputs stay order one across the whole noise range.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import (
    as_batch,
    broadcast_cond,
    check_positive,
    check_positive_int,
    check_random_state,
)
from .diffusion import NoiseSchedule, noise_time_sample, reverse_sde_sample
from .exceptions import (
    DimensionError,
    NotFittedError,
    NumericDivergenceError,
    TrainingDivergenceError,
    ValidationError,
)
from .mlp import MLP, Adam

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    step_count: int = 5000
    learning_rate: float = 1e-3
    seed: int = 0
    schedule: Optional[NoiseSchedule] = None
    divergence_threshold: float = 1e6

    def __post_init__(self):
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.step_count, "step_count")
        check_positive(self.learning_rate, "learning_rate")


@dataclass
class DemoDataset:
    """State / action-chunk records.

    ``actions`` is stored flat, ``(D, K * action_dim)``, time-major: the first
    ``action_dim`` entries are step 0 of the chunk.
    """

    states: np.ndarray
    actions: np.ndarray
    chunk_length: int = 1
    action_dim: int = 1
    control_rate: float = 10.0
    agent_id: int = 0
    roles: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim == 3:
            self.actions = self.actions.reshape(self.actions.shape[0], -1)
        if self.actions.ndim == 1:
            self.actions = self.actions[:, None]
        check_positive_int(self.chunk_length, "chunk_length")
        if self.states.shape[0] != self.actions.shape[0]:
            raise DimensionError("states and actions disagree on record count")
        if self.actions.shape[1] != self.chunk_length * self.action_dim:
            raise DimensionError(
                f"action width {self.actions.shape[1]} != K * action_dim = "
                f"{self.chunk_length} * {self.action_dim}"
            )
        if self.roles is not None:
            self.roles = np.asarray(self.roles, dtype=np.uint8)
            if self.roles.shape != (len(self),):
                raise DimensionError("roles must have one entry per record")

    def __len__(self):
        return self.actions.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_width(self):
        return self.actions.shape[1]


def time_features(t, n_freqs):
    """``[log(t) / 4, sin(f log t), cos(f log t)]`` for ``f = 1, 2, 4, ...``."""
    lt = np.log(np.atleast_1d(np.asarray(t, dtype=np.float64)))
    cols = [lt / 4.0]
    for k in range(n_freqs):
        f = 2.0**k
        cols += [np.sin(f * lt), np.cos(f * lt)]
    return np.stack(cols, axis=-1)


def _tcol(t, n):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    if t.shape != (n,):
        raise DimensionError(f"noise times shape {t.shape} incompatible with batch {n}")
    return t[:, None]


class ScoreMLP(BaseEstimator):
    """Conditional score model ``s(x_t; t, cond)`` with an sklearn-style API.

    Parameters
    ----------
    hidden_sizes : tuple of int
    activation : {"silu", "tanh"}
    n_time_freqs : int
        Number of sin/cos frequency pairs in the time embedding.
    batch_size, step_count, learning_rate : training knobs (Adam, no scheduler).
    schedule : NoiseSchedule, optional
        Defaults to :meth:`NoiseSchedule.for_data` with the fitted data std.
    random_state : int
    base : ScoreField, optional
        Frozen score added to the network output (residual parameterization).
        A residual network starts with a zero head.

    Attributes
    ----------
    params_ : ndarray
        Flat parameter vector.
    loss_trace_ : ndarray
        Minibatch loss per optimizer step.
    """

    def __init__(self, hidden_sizes=(128, 128, 128), activation="silu", n_time_freqs=3,
                 batch_size=256, step_count=5000, learning_rate=1e-3, schedule=None,
                 random_state=0, base=None, divergence_threshold=1e6, warm_start=False,
                 ema_decay=0.999):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.n_time_freqs = n_time_freqs
        self.batch_size = batch_size
        self.step_count = step_count
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.random_state = random_state
        self.base = base
        self.divergence_threshold = divergence_threshold
        self.warm_start = warm_start
        self.ema_decay = ema_decay

    # -- structure -----------------------------------------------------------

    def _build(self, action_width, cond_dim, sigma_data, rng=None):
        self.n_features_in_ = int(action_width)
        self.cond_dim_ = int(cond_dim)
        self.sigma_data_ = float(sigma_data)
        n_in = self.n_features_in_ + 1 + 2 * self.n_time_freqs + self.cond_dim_
        self.mlp_ = MLP([n_in, *self.hidden_sizes, self.n_features_in_], self.activation)
        if rng is not None:
            self.params_ = self.mlp_.init_params(rng, out_scale=0.0 if self.base is not None else 1.0)
        self.schedule_ = self.schedule or NoiseSchedule.for_data(self.sigma_data_)
        return self

    @classmethod
    def from_params(cls, params, action_width, cond_dim=0, sigma_data=1.0, **kwargs):
        """Reconstruct a fitted model from a flat parameter vector."""
        model = cls(**kwargs)
        model._build(action_width, cond_dim, sigma_data)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (model.mlp_.n_params,):
            raise DimensionError(f"expected {model.mlp_.n_params} parameters, got {params.shape}")
        model.params_ = params.copy()
        model.loss_trace_ = np.zeros(0)
        return model

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    def _inputs(self, x, t, cond):
        n = x.shape[0]
        tc = _tcol(t, n)
        c = broadcast_cond(cond, n, self.cond_dim_)
        x_in = x / np.sqrt(tc * tc + self.sigma_data_**2)
        return np.hstack([x_in, time_features(tc[:, 0], self.n_time_freqs), c]), tc, c

    # -- evaluation ----------------------------------------------------------

    def predict_score(self, x_t, t, cond=None, params=None):
        """Score at noisy input ``x_t``; ``t`` is a scalar or one time per row."""
        self._check_fitted()
        x, squeeze = as_batch(x_t, self.n_features_in_, name="x_t")
        inp, tc, c = self._inputs(x, t, cond)
        s = self.mlp_.forward(self.params_ if params is None else params, inp) / tc
        if self.base is not None:
            s = s + self.base(x, t if np.ndim(t) == 0 else np.asarray(t), c)
        return s[0] if squeeze else s

    __call__ = predict_score

    def jacobian_diag(self, x_t, t, cond=None, h=1e-4):
        """Diagonal of ``d score / d x_t`` by central differences."""
        x, squeeze = as_batch(x_t, self.n_features_in_, name="x_t")
        out = np.empty_like(x)
        for j in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[j] = h
            out[:, j] = (self.predict_score(x + e, t, cond)[:, j] - self.predict_score(x - e, t, cond)[:, j]) / (2 * h)
        return out[0] if squeeze else out

    def sample(self, cond=None, n_samples=None, rng=None, schedule=None):
        """Draw action vectors by integrating the reverse SDE with this score."""
        self._check_fitted()
        return reverse_sde_sample(self, schedule or self.schedule_, cond, rng,
                                  dim=self.n_features_in_, n_samples=n_samples)

    # -- training ------------------------------------------------------------

    def loss_and_grad(self, params, actions, cond, t, eps, weights=None):
        """Weighted DSM loss ``mean(w * ||t^2 s(a + t eps) + t eps||^2)`` and its gradient."""
        a = np.asarray(actions, dtype=np.float64)
        n = a.shape[0]
        tc = _tcol(t, n)
        x = a + tc * eps
        inp, _, c = self._inputs(x, tc[:, 0], cond)
        out, cache = self.mlp_.forward(params, inp, return_cache=True)
        # t^2 * (out / t + base) + t * eps
        resid = tc * out + tc * eps
        if self.base is not None:
            resid = resid + tc * tc * self.base(x, tc[:, 0], c)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        per = np.sum(resid * resid, axis=1)
        loss = float(np.mean(w * per))
        grad_out = (2.0 / n) * (w[:, None] * resid) * tc
        grad = self.mlp_.backward(params, cache, grad_out)
        return loss, grad

    def fit(self, X, cond=None, sample_weight=None):
        """Train on clean actions ``X (D, width)`` with optional conditioning ``(D, c)``.

        ``sample_weight`` turns the objective into a weighted DSM loss.
        """
        X, _ = as_batch(X, name="X")
        if X.shape[0] == 0:
            raise ValidationError("empty dataset")
        C = broadcast_cond(cond, X.shape[0])
        rng = check_random_state(self.random_state)
        if not (self.warm_start and hasattr(self, "params_")):
            sigma = float(np.std(X)) if self.schedule is None else self.schedule.sigma_data
            self._build(X.shape[1], C.shape[1], max(sigma, 1e-3), rng)
        w_all = None if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        self.loss_trace_ = _adam_loop(self, _dsm_batches(self, X, C, w_all), rng)
        return self

    def fit_tuples(self, X, t, eps, cond=None, sample_weight=None):
        """Train on fixed ``(clean, t, eps)`` triples instead of fresh noise draws.

        Each minibatch resamples rows of the given arrays; the model must
        already be built (fitted, or constructed by :func:`residual_model`).
        """
        self._check_fitted()
        X, _ = as_batch(X, self.n_features_in_, name="X")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        eps = np.asarray(eps, dtype=np.float64).reshape(X.shape)
        if t.shape[0] != X.shape[0]:
            raise DimensionError("one noise time per row")
        C = broadcast_cond(cond, X.shape[0], self.cond_dim_)
        w = None if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        bs = check_positive_int(self.batch_size, "batch_size")

        def draw(rng):
            idx = rng.integers(0, X.shape[0], size=bs)
            return X[idx], C[idx], t[idx], eps[idx], None if w is None else w[idx]

        self.loss_trace_ = _adam_loop(self, draw, check_random_state(self.random_state))
        return self

    def score(self, X, cond=None, rng=0, repeats=8):
        """Negative DSM loss (higher is better), following the sklearn convention."""
        self._check_fitted()
        return -dsm_loss(self, DemoDataset(broadcast_cond(cond, len(X)), X, chunk_length=1,
                                           action_dim=np.shape(X)[1]),
                         self.schedule_, rng, repeats=repeats)


def _dsm_batches(model, X, C, weights):
    """Minibatch provider for plain DSM: resample records, noise times and noise."""
    bs = check_positive_int(model.batch_size, "batch_size")
    n = X.shape[0]

    def draw(rng):
        idx = rng.integers(0, n, size=bs)
        t = noise_time_sample(model.schedule_, rng, size=bs)
        eps = rng.standard_normal((bs, X.shape[1]))
        w = None if weights is None else weights[idx]
        return X[idx], C[idx], t, eps, w

    return draw


def _adam_loop(model, draw, rng):
    """Adam on minibatches ``draw(rng) -> (actions, cond, t, eps, weights)``; keeps an EMA."""
    steps = check_positive_int(model.step_count, "step_count")
    opt = Adam(model.mlp_.n_params, model.learning_rate)
    params = model.params_
    ema = params.copy()
    decay = float(model.ema_decay or 0.0)
    trace = np.empty(steps)
    for k in range(steps):
        a, c, t, eps, sw = draw(rng)
        # EDM loss weighting: same minimizer as the plain DSM objective, but
        # small noise times are no longer drowned out by the t^2 factor.
        w = (t * t + model.sigma_data_**2) / (t * model.sigma_data_) ** 2
        if sw is not None:
            w = w * sw
        loss, grad = model.loss_and_grad(params, a, c, t, eps, w)
        if not np.isfinite(loss) or loss > model.divergence_threshold:
            raise TrainingDivergenceError(f"training loss {loss!r} diverged", step=k)
        params = opt.step(params, grad)
        # warm-up keeps early averages from being dominated by the random init
        d = min(decay, (1.0 + k) / (10.0 + k))
        ema = d * ema + (1.0 - d) * params
        trace[k] = loss
        if k % 1000 == 0:
            logger.debug("dsm step %d loss %.5f", k, loss)
    model.params_ = ema
    return trace


def mlp_forward(model, x_t, t, cond=None):
    """Score-model forward pass (thin functional alias of :meth:`ScoreMLP.predict_score`)."""
    return model.predict_score(x_t, t, cond)


def dsm_loss(model, batch, schedule, rng, repeats=1, return_draws=False):
    """Monte-Carlo DSM loss ``mean ||t^2 s(a + t eps; t, s) + t eps||^2`` over a batch.

    ``model`` is any score field ``(x, t, cond) -> score`` accepting per-row
    times. With ``return_draws`` the sampled ``(t, eps)`` are returned too.
    """
    if len(batch) == 0:
        raise ValidationError("empty batch")
    rng = check_random_state(rng)
    a = np.tile(batch.actions, (repeats, 1))
    c = np.tile(batch.states, (repeats, 1))
    t = noise_time_sample(schedule, rng, size=a.shape[0])
    eps = rng.standard_normal(a.shape)
    x = a + t[:, None] * eps
    s = np.asarray(model(x, t, c), dtype=np.float64)
    resid = (t * t)[:, None] * s + t[:, None] * eps
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        raise NumericDivergenceError("non-finite DSM loss")
    return (loss, t, eps) if return_draws else loss


def train_dsm(dataset, config, model=None):
    """Fit a :class:`ScoreMLP` (default architecture unless ``model`` is given)."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    model = model if model is not None else ScoreMLP()
    model.set_params(batch_size=config.batch_size, step_count=config.step_count,
                     learning_rate=config.learning_rate, random_state=config.seed,
                     divergence_threshold=config.divergence_threshold)
    if config.schedule is not None:
        model.set_params(schedule=config.schedule)
    model.fit(dataset.actions, dataset.states)
    model.chunk_length_ = dataset.chunk_length
    return model
