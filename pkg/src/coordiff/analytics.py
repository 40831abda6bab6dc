"""Exact checks of the tilted-policy identities on small discrete and Gaussian problems.

On a finite support every quantity (KL divergences, normalizers, tilts) is a
finite sum, so the identities hold to rounding error. The Gaussian oracle
gives closed-form moments of ``prior * exp(-J / lam)`` for quadratic ``J``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, xlogy

from .exceptions import AbsoluteContinuityError, DimensionError, ValidationError


@dataclass(frozen=True)
class DiscreteDist:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        s = np.asarray(self.support)
        if s.shape[0] != p.shape[0]:
            raise DimensionError("one probability per support point")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights, support=None):
        w = np.asarray(weights, dtype=np.float64)
        support = np.arange(w.shape[0]) if support is None else support
        return cls(support, w / w.sum())

    def __len__(self):
        return self.probs.shape[0]


def _check_shared(a, b):
    if len(a) != len(b) or not np.array_equal(a.support, b.support):
        raise DimensionError("distributions must share their support")


def kl(p, q):
    """``KL(p || q)``; ``inf`` when ``p`` puts mass where ``q`` has none."""
    _check_shared(p, q)
    if np.any((p.probs > 0) & (q.probs == 0)):
        return np.inf
    mask = p.probs > 0
    return float(np.sum(xlogy(p.probs[mask], p.probs[mask]) - p.probs[mask] * np.log(q.probs[mask])))


def log_normalizer(prior, J, lam):
    """``log sum_a prior(a) exp(-J(a) / lam)``."""
    J = np.asarray(J, dtype=np.float64)
    mask = prior.probs > 0
    return float(logsumexp(np.log(prior.probs[mask]) - J[mask] / lam))


def tilt(prior, J, lam):
    """Discrete tilted distribution ``prior * exp(-J / lam) / Z``."""
    J = np.asarray(J, dtype=np.float64)
    if J.shape != prior.probs.shape:
        raise DimensionError("one cost per support point")
    lam = float(lam)
    if not lam > 0:
        raise ValidationError("lam must be positive")
    with np.errstate(divide="ignore"):
        logits = np.log(prior.probs) - J / lam
    logits = np.where(prior.probs > 0, logits, -np.inf)
    p = np.exp(logits - logsumexp(logits))
    return DiscreteDist(prior.support, p / p.sum())


def _require_abs_cont(target, prior):
    _check_shared(target, prior)
    if np.any((target.probs > 0) & (prior.probs == 0)):
        raise AbsoluteContinuityError("target has mass where the prior has none")


@dataclass(frozen=True)
class KLCheck:
    lhs: float
    rhs: float
    gap: float


def kl_decomposition_check(target, prior, J, lam):
    """Compare ``KL(target || tilt)`` computed directly and as
    ``KL(target || prior) + log Z + E_target[J] / lam``."""
    _require_abs_cont(target, prior)
    J = np.asarray(J, dtype=np.float64)
    lhs = kl(target, tilt(prior, J, lam))
    mask = target.probs > 0
    rhs = kl(target, prior) + log_normalizer(prior, J, lam) + float(np.sum(target.probs[mask] * J[mask])) / lam
    return KLCheck(lhs, rhs, abs(lhs - rhs))


def optimal_cost(target, prior, lam):
    """Cost ``J* = lam * log(prior / target)`` whose tilt of ``prior`` is ``target``.

    Defined up to an additive constant (the normalizer); points where the
    target has no mass get ``+inf``.
    """
    _require_abs_cont(target, prior)
    lam = float(lam)
    if not lam > 0:
        raise ValidationError("lam must be positive")
    J = np.full(len(prior), np.inf)
    mask = target.probs > 0
    J[mask] = lam * (np.log(prior.probs[mask]) - np.log(target.probs[mask]))
    return J


def total_variation(p, q):
    _check_shared(p, q)
    return 0.5 * float(np.sum(np.abs(p.probs - q.probs)))


@dataclass(frozen=True)
class TiltedMoments:
    mean: np.ndarray
    cov: np.ndarray
    quad_mean: np.ndarray
    quad_cov: np.ndarray


def tilted_oracle_moments(prior_mean, prior_cov, Q, b=None, lam=1.0, quadrature=True):
    """Moments of ``N(prior_mean, prior_cov) * exp(-(a'Qa/2 + b'a) / lam)``.

    The closed form adds precisions. With ``quadrature`` the moments are also
    integrated numerically (1-D or 2-D) as an independent check.
    """
    mu = np.atleast_1d(np.asarray(prior_mean, dtype=np.float64))
    d = mu.shape[0]
    S = np.asarray(prior_cov, dtype=np.float64).reshape(d, d)
    Q = np.asarray(Q, dtype=np.float64).reshape(d, d)
    b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64).reshape(d)
    lam = float(lam)
    if not lam > 0:
        raise ValidationError("lam must be positive")
    S_inv = np.linalg.inv(S)
    P = S_inv + Q / lam
    P = 0.5 * (P + P.T)
    if np.any(np.linalg.eigvalsh(P) <= 0):
        raise ValidationError("tilted precision is not positive definite")
    cov = np.linalg.inv(P)
    mean = cov @ (S_inv @ mu - b / lam)
    if not quadrature or not np.isfinite(lam):
        return TiltedMoments(mean, cov, mean.copy(), cov.copy())
    qm, qc = _quadrature_moments(mu, S_inv, Q, b, lam, mean, cov)
    return TiltedMoments(mean, cov, qm, qc)


def _quadrature_moments(mu, S_inv, Q, b, lam, center, cov):
    d = mu.shape[0]
    if d > 2:
        raise DimensionError("quadrature check supports 1-D and 2-D only")

    def logf(*a):
        a = np.asarray(a)
        r = a - mu
        return -0.5 * r @ S_inv @ r - (0.5 * a @ Q @ a + b @ a) / lam

    shift = logf(*center)
    half = 12.0 * np.sqrt(np.diag(cov))
    lo, hi = center - half, center + half
    opts = dict(epsabs=1e-13, epsrel=1e-11)

    def integral(g):
        if d == 1:
            return integrate.quad(lambda x: g(x) * np.exp(logf(x) - shift), lo[0], hi[0], **opts)[0]
        return integrate.dblquad(lambda y, x: g(x, y) * np.exp(logf(x, y) - shift),
                                 lo[0], hi[0], lo[1], hi[1], **opts)[0]

    Z = integral(lambda *a: 1.0)
    m = np.array([integral(lambda *a, i=i: a[i]) for i in range(d)]) / Z
    C = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            C[i, j] = C[j, i] = integral(lambda *a, i=i, j=j: (a[i] - m[i]) * (a[j] - m[j])) / Z
    return m, C


@dataclass(frozen=True)
class DependenceRatio:
    marginals: tuple
    ratio: np.ndarray
    reconstruction_error: float


def dependence_ratio_check(joint):
    """Factor a 2-D probability table as ``ratio * outer(m1, m2)`` and measure the error."""
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 2:
        raise DimensionError("joint table must be 2-D")
    if np.any(P < 0) or abs(P.sum() - 1.0) > 1e-12:
        raise ValidationError("joint table must be a probability table")
    m1, m2 = P.sum(axis=1), P.sum(axis=0)
    if np.any(m1 <= 0) or np.any(m2 <= 0):
        raise ValidationError("every marginal cell must have positive mass")
    prod = np.outer(m1, m2)
    ratio = P / prod
    err = float(np.max(np.abs(ratio * prod - P)))
    return DependenceRatio((m1, m2), ratio, err)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.value < self.tolerance)


def _random_pair(rng, n=8):
    return (DiscreteDist.from_weights(rng.dirichlet(np.ones(n))),
            DiscreteDist.from_weights(rng.dirichlet(np.ones(n))))


def identity_suite(rng=0, instances=100):
    """Worst-case gaps of the discrete identities over random 8-point instances."""
    rng = np.random.default_rng(rng)
    kl_gap = tv_err = dep_err = 0.0
    for _ in range(instances):
        target, prior = _random_pair(rng)
        lam = float(rng.uniform(0.2, 5.0))
        J = rng.normal(size=len(prior))
        kl_gap = max(kl_gap, kl_decomposition_check(target, prior, J, lam).gap)
        J_star = optimal_cost(target, prior, lam)
        tv_err = max(tv_err, total_variation(tilt(prior, J_star, lam), target))
        dep_err = max(dep_err, dependence_ratio_check(rng.dirichlet(np.ones(36)).reshape(6, 6)).reconstruction_error)
    return [CheckResult("kl_decomposition_gap", kl_gap, 1e-10),
            CheckResult("optimal_cost_tv_error", tv_err, 1e-10),
            CheckResult("dependence_ratio_error", dep_err, 1e-12)]


def gaussian_oracle_suite():
    """Closed-form vs. quadrature moments for the two reference tilts."""
    one = tilted_oracle_moments([0.0], [[1.0]], [[1.0]], lam=1.0)
    two = tilted_oracle_moments([0.0, 0.0], np.eye(2), [[1.0, -1.0], [-1.0, 1.0]], lam=1.0)
    v = np.array([1.0, -1.0])
    diff_var = float(v @ two.cov @ v)
    rel = lambda a, b: float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-300))
    return [CheckResult("tilt_1d_variance_error", abs(float(one.cov[0, 0]) - 0.5), 1e-12),
            CheckResult("tilt_2d_diff_variance_error", abs(diff_var - 2.0 / 3.0), 1e-12),
            CheckResult("tilt_1d_quadrature_rel", rel(one.quad_cov, one.cov), 1e-6),
            CheckResult("tilt_2d_quadrature_rel", rel(two.quad_cov, two.cov), 1e-6)]
