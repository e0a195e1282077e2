"""Non-learned selection rules and policy freezing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FeatureMatrix
from .outcome_model import predict_mean
from .policy import PROB_FLOOR, _sample

__all__ = [
    "threshold_select",
    "greedy_select",
    "initial_policy_pi0",
    "freeze",
    "FixedMarginalPolicy",
]

DEFAULT_GPA_THRESHOLD = 2.5


def threshold_select(predicted_raw, threshold: float) -> np.ndarray:
    """Admit candidates whose mean predicted grade (raw scale) exceeds ``threshold``."""
    predicted_raw = np.asarray(predicted_raw, dtype=float)
    if predicted_raw.ndim != 2:
        raise ValueError("predictions must be (n, K)")
    return (predicted_raw.mean(axis=1) > threshold).astype(np.int8)


def greedy_select(predicted_raw, m: int) -> np.ndarray:
    """Admit the ``m`` candidates with the highest total predicted grade.

    Ties resolve toward the lower row index.
    """
    predicted_raw = np.asarray(predicted_raw, dtype=float)
    if predicted_raw.ndim != 2:
        raise ValueError("predictions must be (n, K)")
    n = predicted_raw.shape[0]
    if not 0 <= m <= n:
        raise ValueError(f"m must lie in [0, {n}], got {m}")
    totals = predicted_raw.sum(axis=1)
    order = np.argsort(-totals, kind="stable")
    a = np.zeros(n, dtype=np.int8)
    a[order[:m]] = 1
    return a


def initial_policy_pi0(outcome_model, X: FeatureMatrix, gpa_threshold: float = DEFAULT_GPA_THRESHOLD) -> np.ndarray:
    """First-stage heuristic: admit if the model's mean predicted grade clears the bar."""
    return threshold_select(predict_mean(outcome_model, X), gpa_threshold)


def freeze(policy):
    """Static snapshot of a policy (parameters are already immutable copies)."""
    return policy.with_flat(policy.flat())


@dataclass(frozen=True)
class FixedMarginalPolicy:
    """Policy-shaped wrapper around fixed acceptance probabilities.

    Lets deterministic rules (whose 0/1 decisions stand in for
    probabilities, clamped away from the boundary) flow through fairness
    evaluation, which expects ``accept_prob``/``sample_actions``.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.clip(np.asarray(self.p, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def _check(self, X: FeatureMatrix) -> None:
        if X.n != self.p.shape[0]:
            raise ValueError("fixed probabilities do not match the pool size")

    def accept_prob(self, X: FeatureMatrix) -> np.ndarray:
        self._check(X)
        return self.p

    def sample_actions(self, X: FeatureMatrix, rng: np.random.Generator, size=None):
        self._check(X)
        return _sample(self.p, rng, size)
