"""Variance-exploding diffusion: forward kernel, noise-time sampling, reverse SDE.

The forward process corrupts a clean vector ``x`` as ``x(t) = x + t * eps`` with
``eps ~ N(0, I)``; samples are generated by integrating

    dx = -2 t score(x, t) dt + sqrt(2 t) dW

backwards from ``t = T`` to ``t = 0`` with Euler-Maruyama on a Karras grid.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
from scipy.special import logsumexp

from ._validation import (
    as_batch,
    broadcast_cond,
    check_positive,
    check_positive_int,
    check_random_state,
)
from .exceptions import DimensionError, NumericDivergenceError, ValidationError


class ScoreField(Protocol):
    """``(x (n, d), t, cond (n, c) | None) -> score (n, d)``; deterministic."""

    def __call__(self, x: np.ndarray, t: float, cond: Optional[np.ndarray] = None) -> np.ndarray:
        ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Time grid and training noise-time distribution.

    Defaults follow the EDM recipe: geometric grid with exponent ``rho`` and a
    log-normal training distribution, both expressed relative to ``sigma_data``.
    """

    T: float = 80.0
    n_steps: int = 50
    rho: float = 7.0
    t_min: float = 0.002
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 1.0

    def __post_init__(self):
        check_positive(self.T, "T")
        check_positive_int(self.n_steps, "n_steps")
        check_positive(self.rho, "rho")
        check_positive(self.t_min, "t_min")
        check_positive(self.p_std, "p_std", strict=False)
        check_positive(self.sigma_data, "sigma_data")
        if self.t_min > self.T:
            raise ValidationError(f"t_min={self.t_min} exceeds T={self.T}")

    @classmethod
    def for_data(cls, sigma_data, **kwargs):
        """Schedule whose T and t_min scale with the data standard deviation."""
        sigma_data = check_positive(float(sigma_data), "sigma_data")
        kwargs.setdefault("T", 80.0 * sigma_data)
        kwargs.setdefault("t_min", 0.002 * sigma_data)
        return cls(sigma_data=sigma_data, **kwargs)

    def time_grid(self):
        """Strictly decreasing grid ``t_0 = T > ... > t_{N-1} = t_min > t_N = 0``.

        ``n_steps == 1`` collapses to ``[T, 0]``.
        """
        n = self.n_steps
        if n == 1:
            return np.array([self.T, 0.0])
        i = np.arange(n)
        hi, lo = self.T ** (1.0 / self.rho), self.t_min ** (1.0 / self.rho)
        ts = (hi + i / (n - 1) * (lo - hi)) ** self.rho
        ts[0], ts[-1] = self.T, self.t_min
        return np.append(ts, 0.0)


@dataclass(frozen=True)
class NoisePoint:
    value: np.ndarray
    noise_time: float


def perturb(x, t, eps):
    """Sample the Gaussian perturbation kernel ``N(x, t^2 I)`` given unit noise."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise DimensionError(f"x shape {x.shape} != eps shape {eps.shape}")
    t = check_positive(float(t), "t", strict=False)
    return NoisePoint(value=x + t * eps, noise_time=t)


def noise_time_sample(schedule, rng, size=None):
    """Draw training noise times ``sigma_data * exp(N(p_mean, p_std^2))`` clamped to ``[t_min, T]``."""
    rng = check_random_state(rng)
    g = rng.normal(schedule.p_mean, schedule.p_std, size=size)
    t = np.clip(schedule.sigma_data * np.exp(g), schedule.t_min, schedule.T)
    return float(t) if size is None else t


def reverse_sde_sample(score, schedule, cond=None, rng=None, *, dim=None, n_samples=None,
                       x_init=None, callback=None):
    """Integrate the reverse-time SDE from ``N(0, T^2 I)`` down to ``t = 0``.

    Parameters
    ----------
    score : ScoreField
        Evaluated once per grid point on the whole batch.
    schedule : NoiseSchedule
    cond : array-like, optional
        Conditioning vector shared by the batch, or one row per sample.
    rng : numpy.random.Generator or int
    dim : int
        Data dimension; inferred from ``x_init`` when given.
    n_samples : int, optional
        Batch size. ``None`` returns a single 1-D vector.
    x_init : array-like, optional
        Explicit terminal noise (already scaled by ``T``).
    callback : callable, optional
        Called as ``callback(step, t, x)`` after every update.

    Returns
    -------
    numpy.ndarray
        ``(n_samples, dim)`` or ``(dim,)``.

    Raises
    ------
    NumericDivergenceError
        If the score is non-finite at some step; ``err.step`` is the grid index.
    """
    rng = check_random_state(rng)
    grid = schedule.time_grid()
    if x_init is not None:
        x, squeeze = as_batch(x_init, dim)
        x = x.copy()
    else:
        if dim is None:
            raise ValidationError("dim is required when x_init is not given")
        n = 1 if n_samples is None else check_positive_int(n_samples, "n_samples")
        squeeze = n_samples is None
        x = schedule.T * rng.standard_normal((n, dim))
    c = None if cond is None else broadcast_cond(cond, x.shape[0])

    last = len(grid) - 2
    for i in range(len(grid) - 1):
        t, t_next = grid[i], grid[i + 1]
        s = np.asarray(score(x, t, c), dtype=np.float64)
        if s.shape != x.shape:
            raise DimensionError(f"score returned shape {s.shape}, expected {x.shape}")
        if not np.all(np.isfinite(s)):
            raise NumericDivergenceError("non-finite score", step=i)
        h = t - t_next
        x = x + 2.0 * t * h * s
        if i != last:
            x = x + np.sqrt(2.0 * t * h) * rng.standard_normal(x.shape)
        if callback is not None:
            callback(i, t_next, x)
    return x[0] if squeeze else x


@dataclass(frozen=True)
class GMMParams:
    """Gaussian mixture with diagonal covariances.

    ``means`` is ``(k, d)``, ``variances`` is ``(k, d)`` (or broadcastable).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        k = w.shape[0]
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu.reshape(k, -1)
        if mu.shape[0] != k:
            raise DimensionError("weights and means disagree on component count")
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim == 1:
            var = var.reshape(k, -1)
        var = np.broadcast_to(var, mu.shape).copy()
        if np.any(w <= 0):
            raise ValidationError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights sum to {w.sum()!r}, not 1")
        if np.any(var <= 0):
            raise ValidationError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self):
        return self.means.shape[1]

    def _component_logpdf(self, x, t):
        t = np.asarray(t, dtype=np.float64)
        t2 = (t * t)[:, None, None] if t.ndim == 1 else t * t
        var = self.variances[None] + t2
        diff = x[:, None, :] - self.means[None]
        return -0.5 * np.sum(diff**2 / var + np.log(2 * np.pi * var), axis=2), diff, var

    def log_density(self, x, t=0.0):
        """Log of the mixture density convolved with ``N(0, t^2 I)``."""
        x, squeeze = as_batch(x, self.dim)
        comp, _, _ = self._component_logpdf(x, t)
        out = logsumexp(comp + np.log(self.weights)[None], axis=1)
        return out[0] if squeeze else out

    def sample(self, n, rng):
        rng = check_random_state(rng)
        k = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((n, self.dim))

    def cdf_1d(self, x, t=0.0):
        """Exact CDF for a 1-D mixture (used as a sampling oracle)."""
        from scipy.stats import norm

        if self.dim != 1:
            raise DimensionError("cdf_1d requires a 1-D mixture")
        x = np.asarray(x, dtype=np.float64)
        sd = np.sqrt(self.variances[:, 0] + t * t)
        return np.sum(self.weights * norm.cdf((x[..., None] - self.means[:, 0]) / sd), axis=-1)

    @property
    def mean(self):
        return self.weights @ self.means

    @property
    def variance(self):
        second = self.weights @ (self.variances + self.means**2)
        return second - self.mean**2


def analytic_score_gmm(params, x, t):
    """Exact score of a Gaussian mixture after noising to time ``t``.

    ``grad_x log sum_k w_k N(x; mu_k, Sigma_k + t^2 I)``, stabilized with
    log-sum-exp responsibilities.
    """
    x, squeeze = as_batch(x, params.dim)
    comp, diff, var = params._component_logpdf(x, t)
    logits = comp + np.log(params.weights)[None]
    resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    s = -np.sum(resp[:, :, None] * diff / var, axis=1)
    return s[0] if squeeze else s


@dataclass(frozen=True)
class GMMScore:
    """Analytic :class:`ScoreField` of a mixture; conditioning is ignored."""

    params: GMMParams

    def __call__(self, x, t, cond=None):
        return analytic_score_gmm(self.params, x, t)


@dataclass(frozen=True)
class GaussianScore:
    """Analytic score of ``N(mean, diag(var))`` noised to time ``t``.

    Also exposes the exact Jacobian diagonal, which the Tweedie covariance
    correction uses.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    var: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), mean.shape).copy()
        if np.any(var <= 0):
            raise ValidationError("variance must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self):
        return self.mean.shape[0]

    def __call__(self, x, t, cond=None):
        x = np.asarray(x, dtype=np.float64)
        t2 = _t2(t)
        return (self.mean - x) / (self.var + t2)

    def jacobian_diag(self, x, t, cond=None):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(-1.0 / (self.var + _t2(t)), x.shape).copy()


def _t2(t):
    """Squared noise time as a scalar or a column for per-row times."""
    t = np.asarray(t, dtype=np.float64)
    return (t * t)[:, None] if t.ndim == 1 else t * t


def as_score_field(fn: Callable) -> ScoreField:
    """Wrap a plain ``f(x, t)`` callable so it accepts (and ignores) conditioning."""

    def field_(x, t, cond=None):
        return fn(x, t)

    return field_
