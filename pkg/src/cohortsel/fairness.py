"""Group fairness of stochastic selection policies.

Penalties are computed from the policy's acceptance probabilities (not
sampled actions), so they are deterministic given a pool and
differentiable in the policy parameters.

* Demographic parity: the largest pairwise gap between group-mean
  acceptance probabilities, hinged at a tolerance:
  P_dem = max(0, max_{g,g'} |mean_g p - mean_{g'} p| - eps).

* Expected marginal contribution (EMC) of candidate i: the expected
  utility change from forcing i into versus out of the selection,
  EMC_i = E_X E_{a~policy} E_y [ u(a with a_i=1) - u(a with a_i=0) ],
  estimated by Monte Carlo with common random numbers for the paired
  difference.  ``emc`` appends one candidate to sampled co-pools;
  ``emc_batch`` scores every member of a fixed pool in one vectorized
  pass (each candidate's own sampled action is overridden, the rest of
  the pool's actions are kept).

* Equality of opportunity: demographic parity restricted to qualified
  candidates, those with EMC >= tau (tau defaults to the admission cost,
  the break-even contribution).

* ``combine_penalties``: weighted sum or max of the two penalties.

Groups absent from a pool (or with no qualified member) are excluded from
the pairwise maximum with a warning; if fewer than two groups remain the
penalty is zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import FeatureMatrix, UtilityConfig, utility_many

__all__ = [
    "FairnessConfig",
    "FairnessReport",
    "demographic_parity_penalty",
    "emc",
    "emc_batch",
    "equality_of_opportunity_penalty",
    "combine_penalties",
    "penalty_prob_gradient",
    "evaluate_fairness",
]


@dataclass(frozen=True)
class FairnessConfig:
    """Tolerance, qualification threshold, combination weights and mode."""

    epsilon: float = 0.05
    tau: float | None = None  # None: use the admission cost from UtilityConfig
    lambda_dem: float = 1.0
    lambda_eq: float = 1.0
    combine_mode: str = "weighted_sum"
    emc_n_x: int = 4
    emc_n_a: int = 8
    emc_n_y: int = 8

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.combine_mode not in ("weighted_sum", "max"):
            raise ValueError(f"unknown combine mode: {self.combine_mode!r}")
        if self.lambda_dem < 0 or self.lambda_eq < 0:
            raise ValueError("combination weights must be non-negative")
        if min(self.emc_n_x, self.emc_n_a, self.emc_n_y) < 1:
            raise ValueError("EMC sample counts must be >= 1")

    def resolve_tau(self, cfg: UtilityConfig) -> float:
        return cfg.c if self.tau is None else self.tau


@dataclass(frozen=True)
class FairnessReport:
    """Per-pool fairness summary."""

    group_rates: dict
    p_dem: float
    p_eq: float
    p_overall: float
    n_qualified: int
    emc_values: np.ndarray | None = None


def _group_means(p: np.ndarray, groups: np.ndarray, mask=None):
    """Mean probability per group among ``mask`` rows; empty groups dropped."""
    names = np.unique(groups)
    means, kept, dropped = [], [], []
    for g in names:
        sel = groups == g
        if mask is not None:
            sel = sel & mask
        if sel.any():
            kept.append(g)
            means.append(float(p[sel].mean()))
        else:
            dropped.append(g)
    return kept, means, dropped


def _max_gap(means):
    """Largest pairwise absolute gap and the (hi, lo) index pair attaining it."""
    arr = np.asarray(means)
    hi = int(arr.argmax())
    lo = int(arr.argmin())
    return float(arr[hi] - arr[lo]), hi, lo


def demographic_parity_penalty(p, groups, epsilon: float = 0.0) -> float:
    """Hinged largest pairwise gap between group-mean acceptance probabilities."""
    p = np.asarray(p, dtype=float)
    groups = np.asarray(groups)
    kept, means, dropped = _group_means(p, groups)
    if dropped:
        warnings.warn(f"group(s) {list(dropped)} have no members in this pool", stacklevel=2)
    if len(kept) < 2:
        warnings.warn("fewer than two groups present; demographic parity penalty is 0", stacklevel=2)
        return 0.0
    gap, _, _ = _max_gap(means)
    return max(0.0, gap - epsilon)


def emc_batch(
    X: FeatureMatrix,
    policy,
    outcome_sampler,
    cfg: UtilityConfig,
    n_a: int,
    n_y: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """EMC estimate for every candidate of the pool ``X``, shape (n,).

    Samples ``n_a`` pool actions and ``n_y`` outcome matrices once, then
    scores each candidate by the paired force-in/force-out utility
    difference on the shared draws:

        EMC_i ~= mean_{a,y} [ sum_k log(eps + S_k^{-i} + y_ik)
                              - log(eps + S_k^{-i}) ] - c

    where S_k^{-i} is course k's outcome sum over the other selected
    candidates.
    """
    actions = policy.sample_actions(X, rng, size=n_a).astype(float)  # (n_a, n)
    draws = np.stack([outcome_sampler(X, rng) for _ in range(n_y)])  # (n_y, n, K)
    sums = np.einsum("mn,qnk->mqk", actions, draws)  # (n_a, n_y, K)
    # course sums excluding each candidate's own (possibly selected) outcome
    contrib = actions[:, None, :, None] * draws[None, :, :, :]  # (n_a, n_y, n, K)
    sums_out = sums[:, :, None, :] - contrib
    gain = np.log(cfg.epsilon_log + sums_out + draws[None, :, :, :]) - np.log(
        cfg.epsilon_log + sums_out
    )
    return gain.sum(axis=-1).mean(axis=(0, 1)) - cfg.c


def emc(
    x_row,
    group,
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
    """EMC of one candidate appended to sampled co-pools.

    ``x_row`` is the candidate's feature vector; each of the ``n_x``
    sampled pools is augmented with the candidate as its last row, actions
    for the co-candidates are drawn from the policy on the augmented pool,
    and the candidate's own entry is forced to 1 and 0.  Returns the Monte
    Carlo mean (optionally with a pool-level standard error).
    """
    if min(n_x, n_a, n_y) < 1:
        raise ValueError("n_x, n_a and n_y must all be >= 1")
    pool_means = np.empty(n_x)
    first_values = None
    for k in range(n_x):
        co = population_sampler(rng)
        X = co.append_row(np.asarray(x_row, dtype=float), group)
        i = X.n - 1
        actions = policy.sample_actions(X, rng, size=n_a).astype(float)
        draws = np.stack([outcome_sampler(X, rng) for _ in range(n_y)])
        a_in = actions.copy()
        a_in[:, i] = 1.0
        a_out = actions.copy()
        a_out[:, i] = 0.0
        diff = utility_many(a_in, draws, cfg) - utility_many(a_out, draws, cfg)
        values = diff.mean(axis=1)  # (n_a,)
        pool_means[k] = values.mean()
        if k == 0:
            first_values = values
    estimate = float(pool_means.mean())
    if not return_stderr:
        return estimate
    if n_x >= 2:
        stderr = float(pool_means.std(ddof=1) / np.sqrt(n_x))
    elif n_a >= 2:
        stderr = float(first_values.std(ddof=1) / np.sqrt(n_a))
    else:
        stderr = 0.0
    return estimate, stderr


def equality_of_opportunity_penalty(
    p, groups, emc_values, tau: float, epsilon: float = 0.0
) -> float:
    """Demographic parity among qualified candidates (EMC >= tau)."""
    p = np.asarray(p, dtype=float)
    groups = np.asarray(groups)
    emc_values = np.asarray(emc_values, dtype=float)
    if emc_values.shape != p.shape:
        raise ValueError("EMC vector must align with the probability vector")
    qualified = emc_values >= tau
    kept, means, dropped = _group_means(p, groups, mask=qualified)
    if dropped:
        warnings.warn(
            f"group(s) {list(dropped)} have no qualified members in this pool", stacklevel=2
        )
    if len(kept) < 2:
        warnings.warn(
            "fewer than two groups with qualified members; opportunity penalty is 0",
            stacklevel=2,
        )
        return 0.0
    gap, _, _ = _max_gap(means)
    return max(0.0, gap - epsilon)


def combine_penalties(p_dem: float, p_eq: float, fcfg: FairnessConfig) -> float:
    if fcfg.combine_mode == "weighted_sum":
        return fcfg.lambda_dem * p_dem + fcfg.lambda_eq * p_eq
    return max(fcfg.lambda_dem * p_dem, fcfg.lambda_eq * p_eq)


def _gap_gradient(p, groups, mask, epsilon):
    """Gradient of the hinged max pairwise group gap w.r.t. each p_i.

    Zero when the hinge is inactive or fewer than two groups qualify;
    otherwise +-1/|group| on the two groups attaining the gap.
    """
    grad = np.zeros_like(np.asarray(p, dtype=float))
    groups = np.asarray(groups)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kept, means, _ = _group_means(np.asarray(p, dtype=float), groups, mask)
    if len(kept) < 2:
        return grad, 0.0
    gap, hi, lo = _max_gap(means)
    penalty = max(0.0, gap - epsilon)
    if penalty <= 0.0:
        return grad, 0.0
    for idx, sign in ((hi, 1.0), (lo, -1.0)):
        sel = groups == kept[idx]
        if mask is not None:
            sel = sel & mask
        grad[sel] = sign / sel.sum()
    return grad, penalty


def penalty_prob_gradient(
    p,
    groups,
    emc_values,
    ucfg: UtilityConfig,
    fcfg: FairnessConfig,
):
    """(d P_overall / d p, P_dem, P_eq, P_overall) for one pool.

    The qualification set (EMC >= tau) is treated as fixed: the penalty is
    differentiated through the probabilities only.
    """
    p = np.asarray(p, dtype=float)
    dem_grad, p_dem = _gap_gradient(p, groups, None, fcfg.epsilon)
    tau = fcfg.resolve_tau(ucfg)
    qualified = np.asarray(emc_values, dtype=float) >= tau
    eq_grad, p_eq = _gap_gradient(p, groups, qualified, fcfg.epsilon)
    if fcfg.combine_mode == "weighted_sum":
        grad = fcfg.lambda_dem * dem_grad + fcfg.lambda_eq * eq_grad
    else:
        if fcfg.lambda_dem * p_dem >= fcfg.lambda_eq * p_eq:
            grad = fcfg.lambda_dem * dem_grad
        else:
            grad = fcfg.lambda_eq * eq_grad
    return grad, p_dem, p_eq, combine_penalties(p_dem, p_eq, fcfg)


def evaluate_fairness(
    policy,
    X: FeatureMatrix,
    outcome_sampler,
    ucfg: UtilityConfig,
    fcfg: FairnessConfig,
    rng: np.random.Generator,
    keep_emc: bool = False,
) -> FairnessReport:
    """Fairness report for one pool: group rates, both penalties, combination.

    Deterministic selection rules participate through a wrapper policy
    whose acceptance probabilities are the (clamped) 0/1 decisions.
    """
    p = policy.accept_prob(X)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kept, means, _ = _group_means(p, X.groups)
        p_dem = demographic_parity_penalty(p, X.groups, fcfg.epsilon)
        emc_values = emc_batch(X, policy, outcome_sampler, ucfg, fcfg.emc_n_a, fcfg.emc_n_y, rng)
        p_eq = equality_of_opportunity_penalty(
            p, X.groups, emc_values, fcfg.resolve_tau(ucfg), fcfg.epsilon
        )
    return FairnessReport(
        group_rates=dict(zip((str(g) for g in kept), means)),
        p_dem=p_dem,
        p_eq=p_eq,
        p_overall=combine_penalties(p_dem, p_eq, fcfg),
        n_qualified=int((emc_values >= fcfg.resolve_tau(ucfg)).sum()),
        emc_values=emc_values if keep_emc else None,
    )
