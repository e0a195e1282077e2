"""Bayesian linear outcome model: one conjugate regression per course.

Each course keeps a normal-inverse-gamma posterior over its weight vector
and noise variance,

    s2 ~ InvGamma(alpha, beta),    w | s2 ~ N(m, s2 * Lambda^{-1}),

with grade observations y = w . [x, 1] + N(0, s2) on the raw scale
[0, RAW_OUTCOME_MAX].  Observing (X, y) updates each course exactly:

    Lambda' = Lambda + X'X
    m'      = Lambda'^{-1} (Lambda m + X'y)
    alpha'  = alpha + n/2
    beta'   = beta + (y'y + m' Lambda m - m'' Lambda' m'') / 2

(primes on the left are posterior quantities; the quadratic forms in the
beta line use the old and new means respectively).  Because the update is
conjugate, batch and sequential updates agree and observation order is
irrelevant.

Predictive draws sample s2, then w, then observation noise; by default the
result is clipped to the raw grade range and rescaled to [0, 1] for utility
evaluation.  ``thompson_draw`` samples one concrete regressor per course
from the posterior, to be used as the fixed outcome model for a whole
decision stage.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .core import FeatureMatrix

__all__ = [
    "RAW_OUTCOME_MAX",
    "PosteriorState",
    "SampledRegressor",
    "default_prior",
    "posterior_update",
    "posterior_predictive_sample",
    "thompson_draw",
    "sample_outcomes",
    "predict_mean",
    "posterior_to_payload",
    "posterior_from_payload",
    "save_posterior",
    "load_posterior",
]

RAW_OUTCOME_MAX = 4.0

_POSTERIOR_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PosteriorState:
    """Stacked per-course normal-inverse-gamma parameters.

    ``mean`` is (K, d1), ``precision`` (K, d1, d1), ``alpha``/``beta`` (K,),
    where d1 counts features plus the bias.  ``n_obs`` is the total number
    of observations folded in so far.
    """

    mean: np.ndarray
    precision: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    n_obs: int = 0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float, copy=True)
        precision = np.array(self.precision, dtype=float, copy=True)
        alpha = np.array(self.alpha, dtype=float, copy=True)
        beta = np.array(self.beta, dtype=float, copy=True)
        if mean.ndim != 2:
            raise ValueError(f"mean must be (K, d1), got shape {mean.shape}")
        K, d1 = mean.shape
        if precision.shape != (K, d1, d1):
            raise ValueError(f"precision must be (K, {d1}, {d1}), got {precision.shape}")
        if alpha.shape != (K,) or beta.shape != (K,):
            raise ValueError("alpha and beta must have one entry per course")
        if (alpha <= 0).any() or (beta <= 0).any():
            raise ValueError("alpha and beta must be positive")
        if not np.allclose(precision, np.swapaxes(precision, 1, 2), atol=1e-8):
            raise ValueError("precision matrices must be symmetric")
        for arr in (mean, precision, alpha, beta):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def n_courses(self) -> int:
        return self.mean.shape[0]

    @property
    def n_weights(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class SampledRegressor:
    """One concrete linear regressor per course: weights (K, d1), noise variances (K,)."""

    weights: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True)
        noise_var = np.array(self.noise_var, dtype=float, copy=True)
        if weights.ndim != 2 or noise_var.shape != (weights.shape[0],):
            raise ValueError("regressor shapes do not match")
        if (noise_var <= 0).any():
            raise ValueError("noise variances must be positive")
        weights.setflags(write=False)
        noise_var.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "noise_var", noise_var)


def default_prior(
    n_features: int,
    n_courses: int = 3,
    ridge: float = 1.0,
    alpha: float = 2.0,
    beta: float = 1.0,
) -> PosteriorState:
    """Weakly informative prior: zero mean, identity precision scaled by ``ridge``."""
    d1 = n_features + 1
    return PosteriorState(
        mean=np.zeros((n_courses, d1)),
        precision=np.tile(ridge * np.eye(d1), (n_courses, 1, 1)),
        alpha=np.full(n_courses, float(alpha)),
        beta=np.full(n_courses, float(beta)),
        n_obs=0,
    )


def _check_targets(state: PosteriorState, X: FeatureMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape != (X.n, state.n_courses):
        raise ValueError(
            f"targets must have shape ({X.n}, {state.n_courses}), got {y.shape}"
        )
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite entries")
    return y


def _chol(precision: np.ndarray, context: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(precision)
        raise ValueError(
            f"{context}: precision matrix not positive definite "
            f"(condition number {cond:.3e})"
        ) from None


def posterior_update(state: PosteriorState, X: FeatureMatrix, y_raw) -> PosteriorState:
    """Fold raw-scale observations for all courses into the posterior."""
    if X.n == 0:
        return state
    y = _check_targets(state, X, y_raw)
    Xb = X.with_bias()
    if Xb.shape[1] != state.n_weights:
        raise ValueError(
            f"model expects {state.n_weights - 1} features, pool has {X.d}"
        )
    gram = Xb.T @ Xb
    K = state.n_courses
    mean = np.empty_like(state.mean)
    precision = np.empty_like(state.precision)
    beta = np.empty_like(state.beta)
    for k in range(K):
        lam, m = state.precision[k], state.mean[k]
        lam_new = lam + gram
        L = _chol(lam_new, f"posterior update (course {k})")
        rhs = lam @ m + Xb.T @ y[:, k]
        m_new = cho_solve((L, True), rhs)
        beta[k] = state.beta[k] + 0.5 * (
            y[:, k] @ y[:, k] + m @ lam @ m - m_new @ lam_new @ m_new
        )
        mean[k] = m_new
        precision[k] = 0.5 * (lam_new + lam_new.T)
    alpha = state.alpha + 0.5 * X.n
    if (beta <= 0).any():
        raise ValueError("posterior update produced a non-positive beta")
    return PosteriorState(mean, precision, alpha, beta, n_obs=state.n_obs + X.n)


def _draw_regressor(state: PosteriorState, rng: np.random.Generator) -> tuple:
    """One (weights, noise_var) joint draw from the posterior, all courses."""
    K, d1 = state.mean.shape
    weights = np.empty((K, d1))
    noise_var = np.empty(K)
    for k in range(K):
        sigma2 = 1.0 / rng.gamma(state.alpha[k], 1.0 / state.beta[k])
        L = _chol(state.precision[k], f"posterior sampling (course {k})")
        z = rng.standard_normal(d1)
        # solve L^T u = z  =>  cov(u) = Lambda^{-1}
        u = np.linalg.solve(L.T, z)
        weights[k] = state.mean[k] + np.sqrt(sigma2) * u
        noise_var[k] = sigma2
    return weights, noise_var


def _finalize(raw: np.ndarray, clip: bool, normalized: bool) -> np.ndarray:
    if clip:
        raw = np.clip(raw, 0.0, RAW_OUTCOME_MAX)
    if normalized:
        if not clip:
            raise ValueError("normalized output requires clipping to the raw range")
        raw = raw / RAW_OUTCOME_MAX
    return raw


def posterior_predictive_sample(
    state: PosteriorState,
    X: FeatureMatrix,
    rng: np.random.Generator,
    clip: bool = True,
    normalized: bool = True,
) -> np.ndarray:
    """One (n, K) draw from the posterior predictive at each row of ``X``.

    Samples noise variance, weights, then observation noise.  With the
    default flags the draw is clipped to the raw grade range and rescaled
    to [0, 1]; ``clip=False, normalized=False`` returns the untruncated
    draw (whose moments match the analytic predictive distribution).
    """
    Xb = X.with_bias()
    if Xb.shape[1] != state.n_weights:
        raise ValueError(f"model expects {state.n_weights - 1} features, pool has {X.d}")
    weights, noise_var = _draw_regressor(state, rng)
    raw = Xb @ weights.T + rng.standard_normal((X.n, state.n_courses)) * np.sqrt(noise_var)
    return _finalize(raw, clip, normalized)


def thompson_draw(state: PosteriorState, rng: np.random.Generator) -> SampledRegressor:
    """Sample one concrete regressor from the posterior (all courses jointly)."""
    weights, noise_var = _draw_regressor(state, rng)
    return SampledRegressor(weights, noise_var)


def sample_outcomes(
    reg: SampledRegressor,
    X: FeatureMatrix,
    rng: np.random.Generator,
    clip: bool = True,
    normalized: bool = True,
) -> np.ndarray:
    """One (n, K) outcome draw from a fixed sampled regressor."""
    Xb = X.with_bias()
    if Xb.shape[1] != reg.weights.shape[1]:
        raise ValueError("regressor feature count does not match the pool")
    raw = Xb @ reg.weights.T + rng.standard_normal(
        (X.n, reg.weights.shape[0])
    ) * np.sqrt(reg.noise_var)
    return _finalize(raw, clip, normalized)


def predict_mean(model, X: FeatureMatrix, clip: bool = True) -> np.ndarray:
    """Posterior-mean (or sampled-regressor) grade prediction, raw scale, (n, K)."""
    if isinstance(model, PosteriorState):
        weights = model.mean
    elif isinstance(model, SampledRegressor):
        weights = model.weights
    else:
        raise TypeError(f"expected PosteriorState or SampledRegressor, got {type(model).__name__}")
    Xb = X.with_bias()
    if Xb.shape[1] != weights.shape[1]:
        raise ValueError("model feature count does not match the pool")
    raw = Xb @ weights.T
    return np.clip(raw, 0.0, RAW_OUTCOME_MAX) if clip else raw


def posterior_to_payload(state: PosteriorState) -> dict:
    return {
        "format_version": _POSTERIOR_FORMAT_VERSION,
        "mean": state.mean.tolist(),
        "precision": state.precision.tolist(),
        "alpha": state.alpha.tolist(),
        "beta": state.beta.tolist(),
        "n_obs": int(state.n_obs),
    }


def posterior_from_payload(payload: dict) -> PosteriorState:
    version = payload.get("format_version")
    if version != _POSTERIOR_FORMAT_VERSION:
        raise ValueError(f"unsupported posterior format version: {version!r}")
    return PosteriorState(
        mean=np.asarray(payload["mean"], dtype=float),
        precision=np.asarray(payload["precision"], dtype=float),
        alpha=np.asarray(payload["alpha"], dtype=float),
        beta=np.asarray(payload["beta"], dtype=float),
        n_obs=int(payload["n_obs"]),
    )


def save_posterior(state: PosteriorState, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(posterior_to_payload(state), fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_posterior(path: str) -> PosteriorState:
    with open(path, encoding="utf-8") as fh:
        return posterior_from_payload(json.load(fh))
