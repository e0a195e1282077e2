"""Log-sum cohort utility and its Monte Carlo estimators.

The value of admitting the subset flagged by a binary vector ``a`` from a
pool whose per-course outcomes are ``y`` (shape ``(n, K)``) is

    u(a, y) = sum_k log(eps + sum_i a[i] * y[i, k]) - c * sum_i a[i]

The logarithm rewards each course's aggregate outcome with diminishing
returns, the linear term charges a fixed cost ``c`` per admitted candidate,
and ``eps`` keeps the empty cohort finite.

Two expectation layers stack on top.  ``expected_utility_given_x``
integrates outcome uncertainty for a fixed pool and selection;
``expected_policy_utility`` additionally integrates over random pools and a
stochastic selection policy:

    U(policy) = E_X E_{a ~ policy(.|X)} E_{y ~ P(y|X)} [ u(a, y) ]

estimated with ``n_x`` pool draws, ``n_a`` action draws per pool and
``n_y`` outcome draws per pool.  Outcome draws are shared across the action
draws of a pool; outcomes do not depend on the selection, so sharing leaves
the estimator unbiased and saves sampler calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "UtilityConfig",
    "FeatureMatrix",
    "utility",
    "utility_many",
    "expected_utility_given_x",
    "expected_policy_utility",
]


@dataclass(frozen=True)
class UtilityConfig:
    """Knobs of the log-sum utility: per-admit cost, log guard, course count."""

    c: float = 0.1
    epsilon_log: float = 1e-6
    n_courses: int = 3

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"admission cost must be non-negative, got {self.c}")
        if not 0.0 < self.epsilon_log <= 1e-3:
            raise ValueError(
                f"epsilon_log must lie in (0, 1e-3], got {self.epsilon_log}"
            )
        if self.n_courses < 1:
            raise ValueError(f"need at least one course, got {self.n_courses}")


@dataclass(frozen=True)
class FeatureMatrix:
    """Scaled candidate features plus a per-row group label.

    ``values`` is an ``(n, d)`` float matrix (min-max scaled numerics and
    one-hot indicators; nominally in [0, 1], though values transformed with
    statistics fitted elsewhere may fall slightly outside).  ``groups``
    holds one label per row for fairness accounting.  Rows are independent
    candidates; a constant bias column is *not* stored — policies and
    outcome models append it on the fly.  Instances are treated as
    immutable; the underlying arrays are marked read-only.
    """

    values: np.ndarray
    groups: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {values.shape}")
        if values.shape[1] < 1:
            raise ValueError("feature matrix needs at least one column")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains non-finite entries")
        groups = np.array(self.groups, copy=True)
        if groups.shape != (values.shape[0],):
            raise ValueError(
                f"group labels have shape {groups.shape}, expected ({values.shape[0]},)"
            )
        names = tuple(self.feature_names)
        if names and len(names) != values.shape[1]:
            raise ValueError("feature_names length does not match column count")
        values.setflags(write=False)
        groups.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def with_bias(self) -> np.ndarray:
        """Features with a constant-1 column appended, shape ``(n, d+1)``."""
        return np.hstack([self.values, np.ones((self.n, 1))])

    def group_names(self) -> tuple:
        return tuple(np.unique(self.groups))

    def subset(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[idx], self.groups[idx], self.feature_names)

    def append_row(self, x_row: np.ndarray, group) -> "FeatureMatrix":
        values = np.vstack([self.values, np.asarray(x_row, dtype=float)[None, :]])
        groups = np.concatenate([self.groups, np.asarray([group], dtype=self.groups.dtype)])
        return FeatureMatrix(values, groups, self.feature_names)


def _check_actions(a, n: int) -> np.ndarray:
    a = np.asarray(a)
    if a.shape[-1] != n:
        raise ValueError(f"action vector has length {a.shape[-1]}, pool has {n}")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError("actions must be 0/1")
    return a.astype(float)


def _check_outcomes(y, cfg: UtilityConfig) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != cfg.n_courses:
        raise ValueError(
            f"outcomes must have shape (n, {cfg.n_courses}), got {y.shape}"
        )
    if np.isnan(y).any():
        raise ValueError("outcomes contain NaN")
    if y.size and y.min() < 0:
        raise ValueError("outcomes must be non-negative")
    return y


def utility(a, y, cfg: UtilityConfig) -> float:
    """u(a, y) for one selection and one outcome matrix."""
    y = _check_outcomes(y, cfg)
    a = _check_actions(a, y.shape[0])
    course_sums = a @ y  # (K,)
    return float(np.sum(np.log(cfg.epsilon_log + course_sums)) - cfg.c * a.sum())


def utility_many(actions, outcomes, cfg: UtilityConfig) -> np.ndarray:
    """Utility for every (action, outcome-draw) pair.

    ``actions`` has shape ``(M, n)``, ``outcomes`` ``(Q, n, K)``; returns an
    ``(M, Q)`` matrix.  Same formula as :func:`utility`, vectorized for the
    training and evaluation hot paths.
    """
    actions = np.asarray(actions, dtype=float)
    outcomes = np.asarray(outcomes, dtype=float)
    sums = np.einsum("mn,qnk->mqk", actions, outcomes)
    logs = np.log(cfg.epsilon_log + sums).sum(axis=-1)  # (M, Q)
    return logs - cfg.c * actions.sum(axis=1)[:, None]


def expected_utility_given_x(
    a,
    X: FeatureMatrix,
    outcome_sampler,
    cfg: UtilityConfig,
    n_y: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo mean of u(a, y) over ``n_y`` outcome draws for pool ``X``.

    ``outcome_sampler(X, rng)`` must return an ``(n, K)`` outcome matrix on
    the normalized scale; sampler exceptions propagate.
    """
    if n_y < 1:
        raise ValueError(f"n_y must be >= 1, got {n_y}")
    a = _check_actions(a, X.n)
    draws = np.stack([_check_outcomes(outcome_sampler(X, rng), cfg) for _ in range(n_y)])
    return float(utility_many(a[None, :], draws, cfg).mean())


def expected_policy_utility(
    policy,
    population_sampler,
    outcome_sampler,
    cfg: UtilityConfig,
    n_x: int,
    n_a: int,
    n_y: int,
    rng: np.random.Generator,
    return_stderr: bool = False,
):
    """Nested Monte Carlo estimate of the expected policy utility.

    Draws ``n_x`` pools from ``population_sampler(rng)``, then per pool
    ``n_a`` actions from the policy and ``n_y`` outcome matrices (shared
    across the pool's actions).  Returns the grand mean; with
    ``return_stderr=True`` also a standard error — across pool-level means
    when ``n_x >= 2`` (pools are the independent replicates), otherwise
    across the single pool's action draws.
    """
    if min(n_x, n_a, n_y) < 1:
        raise ValueError("n_x, n_a and n_y must all be >= 1")
    pool_means = np.empty(n_x)
    first_pool_values = None
    for k in range(n_x):
        X = population_sampler(rng)
        actions = policy.sample_actions(X, rng, size=n_a)
        draws = np.stack(
            [_check_outcomes(outcome_sampler(X, rng), cfg) for _ in range(n_y)]
        )
        values = utility_many(actions, draws, cfg).mean(axis=1)  # (n_a,)
        pool_means[k] = values.mean()
        if k == 0:
            first_pool_values = values
    estimate = float(pool_means.mean())
    if not return_stderr:
        return estimate
    if n_x >= 2:
        stderr = float(pool_means.std(ddof=1) / np.sqrt(n_x))
    elif n_a >= 2:
        stderr = float(first_pool_values.std(ddof=1) / np.sqrt(n_a))
    else:
        stderr = 0.0
    return estimate, stderr
