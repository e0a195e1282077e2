"""Policy-gradient training of selection policies.

The expected-utility gradient is estimated with the score-function
(REINFORCE) identity: for pools X^(k) ~ P(X), actions a^(k,m) ~ policy and
outcome-averaged utilities U_hat(k,m),

    grad ~= (1/n_x) sum_k (1/n_a) sum_m U_hat(k,m) *
            grad_theta sum_j log p(a_j^(k,m) | x_j^(k))

Outcome draws are shared across a pool's action samples.  An optional
baseline subtracts the leave-one-out mean of the other U_hat values from
each sample before weighting — each sample's baseline is then independent
of its own action draw, so the estimator stays unbiased while its variance
drops.

Training ascends  U(policy) - fairness_weight * P_overall(policy) ;
equivalently it descends the loss L = -(score-function surrogate) +
fairness_weight * P_overall.  The fairness penalty is computed from the
acceptance probabilities of the same sampled pools and differentiated
pathwise (``prob_backprop``).  Gradients are clipped in global norm; a
non-finite gradient skips the iteration (parameters kept, event recorded).

Per-iteration randomness comes from the substream
``generator(seed, "iteration", t)`` consumed in a fixed documented order
(per pool: population draw, action draws, outcome draws, then fairness
sampling), so runs are reproducible from the config alone.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .core import FeatureMatrix, UtilityConfig, utility_many, _check_outcomes
from .fairness import FairnessConfig, emc_batch, penalty_prob_gradient
from .rng import generator

__all__ = [
    "OptimConfig",
    "AdamState",
    "GradientStats",
    "TraceRow",
    "TrainingTrace",
    "estimate_policy_gradient",
    "step",
    "train",
]


@dataclass(frozen=True)
class OptimConfig:
    """Training knobs: step sizes, sample counts, method, fairness weight."""

    eta: float = 0.05
    iterations: int = 1000
    n_x: int = 4
    n_a: int = 8
    n_y: int = 8
    method: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    baseline_mode: str = "none"
    fairness_weight: float = 0.0
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.n_x, self.n_a, self.n_y) < 1:
            raise ValueError("n_x, n_a and n_y must all be >= 1")
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method: {self.method!r}")
        if self.baseline_mode not in ("none", "mean"):
            raise ValueError(f"unknown baseline mode: {self.baseline_mode!r}")
        if self.fairness_weight < 0:
            raise ValueError("fairness_weight must be non-negative")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class GradientStats:
    utility: float
    accept_rate: float
    pools: tuple


def estimate_policy_gradient(
    policy,
    population_sampler,
    outcome_sampler,
    ucfg: UtilityConfig,
    n_x: int,
    n_a: int,
    n_y: int,
    rng: np.random.Generator,
    baseline_mode: str = "none",
    dropout_rng: np.random.Generator | None = None,
    return_stats: bool = False,
):
    """One score-function gradient estimate (flat parameter vector).

    With ``baseline_mode="mean"`` each sample is weighted by its utility
    minus the mean of all *other* samples' utilities (leave-one-out), which
    keeps the estimator unbiased.  ``dropout_rng`` activates dropout inside
    the score-gradient passes of policies that have it.
    """
    if min(n_x, n_a, n_y) < 1:
        raise ValueError("n_x, n_a and n_y must all be >= 1")
    values = np.empty((n_x, n_a))
    score_grads = []
    pools = []
    accepted = 0.0
    total = 0
    for k in range(n_x):
        X = population_sampler(rng)
        actions = policy.sample_actions(X, rng, size=n_a)
        draws = np.stack(
            [_check_outcomes(outcome_sampler(X, rng), ucfg) for _ in range(n_y)]
        )
        values[k] = utility_many(actions, draws, ucfg).mean(axis=1)
        score_grads.append(policy.log_prob_grad_many(X, actions, dropout_rng=dropout_rng))
        pools.append(X)
        accepted += actions.sum()
        total += actions.size
    if baseline_mode == "mean" and values.size > 1:
        baselines = (values.sum() - values) / (values.size - 1)
        weights = values - baselines
    else:
        weights = values
    grad = np.zeros(policy.flat().size)
    for k in range(n_x):
        grad += weights[k] @ score_grads[k]
    grad /= n_x * n_a
    if not return_stats:
        return grad
    stats = GradientStats(
        utility=float(values.mean()),
        accept_rate=float(accepted / total),
        pools=tuple(pools),
    )
    return grad, stats


def step(policy, grad: np.ndarray, cfg: OptimConfig, opt_state):
    """One ascent step; returns (new policy, new optimizer state).

    A non-finite gradient leaves both unchanged and returns ``skipped=True``
    as a third element.
    """
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        return policy, opt_state, True
    flat = policy.flat()
    if cfg.method == "sgd":
        return policy.with_flat(flat + cfg.eta * grad), opt_state, False
    if opt_state is None:
        opt_state = AdamState(np.zeros_like(flat), np.zeros_like(flat))
    t = opt_state.t + 1
    m = cfg.beta1 * opt_state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * opt_state.v + (1.0 - cfg.beta2) * grad**2
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_flat = flat + cfg.eta * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return policy.with_flat(new_flat), AdamState(m, v, t), False


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    utility: float
    grad_norm: float
    accept_rate: float
    p_dem: float
    p_eq: float
    p_overall: float
    skipped: bool
    wall_clock_s: float


@dataclass
class TrainingTrace:
    """Per-iteration training log.

    CSV column order is fixed: iteration, utility, grad_norm, accept_rate,
    p_dem, p_eq, p_overall, skipped, wall_clock_s.
    """

    rows: list = field(default_factory=list)

    COLUMNS = (
        "iteration",
        "utility",
        "grad_norm",
        "accept_rate",
        "p_dem",
        "p_eq",
        "p_overall",
        "skipped",
        "wall_clock_s",
    )

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow(
                    [
                        r.iteration,
                        repr(r.utility),
                        repr(r.grad_norm),
                        repr(r.accept_rate),
                        repr(r.p_dem),
                        repr(r.p_eq),
                        repr(r.p_overall),
                        int(r.skipped),
                        repr(r.wall_clock_s),
                    ]
                )


def _clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if np.isfinite(norm) and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def train(
    policy,
    population_sampler,
    outcome_sampler,
    ucfg: UtilityConfig,
    cfg: OptimConfig,
    fcfg: FairnessConfig | None = None,
):
    """Run the full training loop; returns (final policy, TrainingTrace).

    When a fairness configuration is given, both penalties are evaluated on
    the iteration's sampled pools and recorded each iteration; their
    pathwise gradient is applied only if ``cfg.fairness_weight > 0``.
    """
    trace = TrainingTrace()
    opt_state = None
    has_dropout = getattr(policy, "p_drop", 0.0) > 0.0
    for t in range(cfg.iterations):
        start = time.perf_counter()
        rng = generator(cfg.seed, "iteration", t)
        dropout_rng = generator(cfg.seed, "dropout", t) if has_dropout else None
        grad, stats = estimate_policy_gradient(
            policy,
            population_sampler,
            outcome_sampler,
            ucfg,
            cfg.n_x,
            cfg.n_a,
            cfg.n_y,
            rng,
            baseline_mode=cfg.baseline_mode,
            dropout_rng=dropout_rng,
            return_stats=True,
        )
        p_dem = p_eq = p_overall = float("nan")
        if fcfg is not None:
            frng = generator(cfg.seed, "fairness", t)
            pen_grad = np.zeros_like(grad)
            dems, eqs, overalls = [], [], []
            for X in stats.pools:
                p = policy.accept_prob(X)
                emc_values = emc_batch(
                    X, policy, outcome_sampler, ucfg, fcfg.emc_n_a, fcfg.emc_n_y, frng
                )
                dpen, d, e, o = penalty_prob_gradient(p, X.groups, emc_values, ucfg, fcfg)
                if cfg.fairness_weight > 0.0:
                    pen_grad += policy.prob_backprop(X, dpen)
                dems.append(d)
                eqs.append(e)
                overalls.append(o)
            p_dem = float(np.mean(dems))
            p_eq = float(np.mean(eqs))
            p_overall = float(np.mean(overalls))
            if cfg.fairness_weight > 0.0:
                grad = grad - cfg.fairness_weight * pen_grad / len(stats.pools)
        grad = _clip(grad, cfg.grad_clip)
        policy, opt_state, skipped = step(policy, grad, cfg, opt_state)
        trace.append(
            TraceRow(
                iteration=t,
                utility=stats.utility,
                grad_norm=float(np.linalg.norm(grad)),
                accept_rate=stats.accept_rate,
                p_dem=p_dem,
                p_eq=p_eq,
                p_overall=p_overall,
                skipped=skipped,
                wall_clock_s=time.perf_counter() - start,
            )
        )
    return policy, trace
