"""Stochastic cohort selection: policy-gradient training of set-valued
admission policies, fairness evaluation, and sequential admission
simulation with continuously refit population and outcome models."""

__version__ = "0.1.0"

from .core import FeatureMatrix, UtilityConfig, utility, expected_policy_utility
from .policy import LinearPolicy, MlpPolicy, init_linear_policy, init_mlp_policy
from .outcome_model import PosteriorState, default_prior, posterior_update
from .fairness import FairnessConfig, FairnessReport
from .optimizer import OptimConfig, train

__all__ = [
    "FeatureMatrix",
    "UtilityConfig",
    "utility",
    "expected_policy_utility",
    "LinearPolicy",
    "MlpPolicy",
    "init_linear_policy",
    "init_mlp_policy",
    "PosteriorState",
    "default_prior",
    "posterior_update",
    "FairnessConfig",
    "FairnessReport",
    "OptimConfig",
    "train",
    "__version__",
]
