"""Composing single-agent diffusion policies into coordinated multi-agent behaviour
through cost-guided sampling."""

from .composition import (
    GuidanceConfig,
    ProductPolicy,
    codi_guidance_score,
    codi_sample,
    codi_weights,
    product_score,
    tweedie_posterior,
)
from .diffusion import GaussianScore, GMMParams, NoiseSchedule, analytic_score_gmm, reverse_sde_sample
from .env import CostSpec, EnvConfig, WorldState, evaluate_cost, step_dynamics
from .exceptions import (
    CoordiffError,
    DegenerateWeightsError,
    NotFittedError,
    NumericDivergenceError,
    PersistenceError,
    ValidationError,
)
from .harness import METHODS, RunConfig, compute_metrics, evaluate_method, make_sampler
from .score_net import DemoDataset, ScoreMLP, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CoordiffError",
    "CostSpec",
    "DegenerateWeightsError",
    "DemoDataset",
    "EnvConfig",
    "GMMParams",
    "GaussianScore",
    "GuidanceConfig",
    "METHODS",
    "NoiseSchedule",
    "NotFittedError",
    "NumericDivergenceError",
    "PersistenceError",
    "ProductPolicy",
    "RunConfig",
    "ScoreMLP",
    "TrainConfig",
    "ValidationError",
    "WorldState",
    "analytic_score_gmm",
    "codi_guidance_score",
    "codi_sample",
    "codi_weights",
    "compute_metrics",
    "evaluate_cost",
    "evaluate_method",
    "make_sampler",
    "product_score",
    "reverse_sde_sample",
    "step_dynamics",
    "tweedie_posterior",
]
