"""Stochastic per-candidate selection policies.

A policy maps each candidate's features (with a constant bias feature
appended) to an independent acceptance probability; an action is one
Bernoulli draw per candidate.  Probabilities are clamped to
``[PROB_FLOOR, 1 - PROB_FLOOR]`` so log-probabilities stay finite.

Two parameterizations are provided:

* ``LinearPolicy`` — p_i = sigmoid(theta . [x_i, 1]).  Its score gradient
  has the closed form  grad_theta sum_j log p(a_j|x_j) =
  sum_j [x_j, 1] * (1{a_j=1} * (1 - p_j) - 1{a_j=0} * p_j).
* ``MlpPolicy`` — two ReLU hidden layers, dropout after each, sigmoid
  output.  Dropout uses inverted scaling (masks divided by the keep rate)
  so probability evaluation runs the weights unscaled; masks are drawn only
  in gradient passes that receive a ``dropout_rng``.

Both expose ``log_prob_grad``/``log_prob_grad_many`` (score-function
machinery for utility gradients, using the identity d log p(a|z) / dz =
a - sigmoid(z)) and ``prob_backprop`` (a vector-Jacobian product through
the acceptance probabilities, used by differentiable penalties).
Parameters are immutable snapshots: updates return new objects.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import FeatureMatrix

__all__ = [
    "PROB_FLOOR",
    "LinearPolicy",
    "MlpPolicy",
    "init_linear_policy",
    "init_mlp_policy",
    "policy_to_payload",
    "policy_from_payload",
    "save_policy",
    "load_policy",
]

PROB_FLOOR = 1e-7

_POLICY_FORMAT_VERSION = 1


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def _sample(p: np.ndarray, rng: np.random.Generator, size) -> np.ndarray:
    if size is None:
        return (rng.random(p.shape[0]) < p).astype(np.int8)
    return (rng.random((size, p.shape[0])) < p[None, :]).astype(np.int8)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LinearPolicy:
    """Acceptance probability sigmoid(theta . [x, 1]) per candidate."""

    theta: np.ndarray

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 1 or theta.size < 2:
            raise ValueError(f"theta must be 1-d with a bias entry, got shape {theta.shape}")
        object.__setattr__(self, "theta", theta)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def _check(self, X: FeatureMatrix) -> np.ndarray:
        if X.d + 1 != self.theta.size:
            raise ValueError(
                f"policy expects {self.theta.size - 1} features, pool has {X.d}"
            )
        return X.with_bias()

    def accept_prob(self, X: FeatureMatrix) -> np.ndarray:
        return _clamp(expit(self._check(X) @ self.theta))

    def sample_actions(self, X: FeatureMatrix, rng: np.random.Generator, size=None):
        return _sample(self.accept_prob(X), rng, size)

    def log_prob_grad_many(self, X: FeatureMatrix, actions, dropout_rng=None) -> np.ndarray:
        """Score gradients for each action row: ``(M, n_params)``."""
        Xb = self._check(X)
        p = _clamp(expit(Xb @ self.theta))
        actions = np.asarray(actions, dtype=float)
        return (actions - p[None, :]) @ Xb

    def log_prob_grad(self, X: FeatureMatrix, a, dropout_rng=None) -> np.ndarray:
        return self.log_prob_grad_many(X, np.asarray(a)[None, :], dropout_rng)[0]

    def prob_backprop(self, X: FeatureMatrix, dp, dropout_rng=None) -> np.ndarray:
        """Gradient of sum_i dp[i] * p_i with respect to theta."""
        Xb = self._check(X)
        p = _clamp(expit(Xb @ self.theta))
        return (np.asarray(dp, dtype=float) * p * (1.0 - p)) @ Xb

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def with_flat(self, flat: np.ndarray) -> "LinearPolicy":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.theta.shape:
            raise ValueError("flat parameter vector has the wrong length")
        return LinearPolicy(flat)


@dataclass(frozen=True)
class MlpPolicy:
    """Two-hidden-layer ReLU network with a sigmoid acceptance output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray  # shape (1,)
    p_drop: float = 0.1

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        d1, h1 = self.w1.shape
        h2 = self.w2.shape[1]
        if self.b1.shape != (h1,) or self.w2.shape != (h1, h2):
            raise ValueError("hidden layer shapes do not chain")
        if self.b2.shape != (h2,) or self.w3.shape != (h2,) or self.b3.shape != (1,):
            raise ValueError("output layer shapes do not chain")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p_drop}")

    @property
    def hidden(self) -> tuple[int, int]:
        return (self.w1.shape[1], self.w2.shape[1])

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._arrays())

    def _arrays(self):
        return (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)

    def _check(self, X: FeatureMatrix) -> np.ndarray:
        if X.d + 1 != self.w1.shape[0]:
            raise ValueError(
                f"policy expects {self.w1.shape[0] - 1} features, pool has {X.d}"
            )
        return X.with_bias()

    def _forward(self, Xb: np.ndarray, dropout_rng):
        z1 = Xb @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        m1 = m2 = None
        if dropout_rng is not None and self.p_drop > 0.0:
            keep = 1.0 - self.p_drop
            m1 = (dropout_rng.random(h1.shape) < keep) / keep
            h1 = h1 * m1
        z2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(z2, 0.0)
        if dropout_rng is not None and self.p_drop > 0.0:
            keep = 1.0 - self.p_drop
            m2 = (dropout_rng.random(h2.shape) < keep) / keep
            h2 = h2 * m2
        z3 = h2 @ self.w3 + self.b3[0]
        p = _clamp(expit(z3))
        return p, (Xb, z1, h1, m1, z2, h2, m2)

    def accept_prob(self, X: FeatureMatrix) -> np.ndarray:
        return self._forward(self._check(X), None)[0]

    def sample_actions(self, X: FeatureMatrix, rng: np.random.Generator, size=None):
        return _sample(self.accept_prob(X), rng, size)

    def _backward(self, cache, dz3: np.ndarray) -> np.ndarray:
        """Backpropagate output-logit sensitivities ``dz3`` of shape (M, n).

        Returns flat parameter gradients, shape ``(M, n_params)``.
        """
        Xb, z1, h1, m1, z2, h2, m2 = cache
        dw3 = dz3 @ h2  # (M, h2)
        db3 = dz3.sum(axis=1)[:, None]  # (M, 1)
        dh2 = dz3[:, :, None] * self.w3[None, None, :]  # (M, n, h2)
        dz2 = dh2 * (z2 > 0.0)[None, :, :]
        if m2 is not None:
            dz2 = dz2 * m2[None, :, :]
        dw2 = np.einsum("mnj,ni->mij", dz2, h1)
        db2 = dz2.sum(axis=1)
        dh1 = dz2 @ self.w2.T  # (M, n, h1)
        dz1 = dh1 * (z1 > 0.0)[None, :, :]
        if m1 is not None:
            dz1 = dz1 * m1[None, :, :]
        dw1 = np.einsum("mni,nd->mdi", dz1, Xb)
        db1 = dz1.sum(axis=1)
        M = dz3.shape[0]
        return np.concatenate(
            [
                dw1.reshape(M, -1),
                db1,
                dw2.reshape(M, -1),
                db2,
                dw3,
                db3,
            ],
            axis=1,
        )

    def log_prob_grad_many(self, X: FeatureMatrix, actions, dropout_rng=None) -> np.ndarray:
        """Score gradients for each action row: ``(M, n_params)``.

        With a ``dropout_rng``, one set of dropout masks is drawn and shared
        by all action rows (they come from a single gradient pass).
        """
        Xb = self._check(X)
        p, cache = self._forward(Xb, dropout_rng)
        actions = np.asarray(actions, dtype=float)
        return self._backward(cache, actions - p[None, :])

    def log_prob_grad(self, X: FeatureMatrix, a, dropout_rng=None) -> np.ndarray:
        return self.log_prob_grad_many(X, np.asarray(a)[None, :], dropout_rng)[0]

    def prob_backprop(self, X: FeatureMatrix, dp, dropout_rng=None) -> np.ndarray:
        """Gradient of sum_i dp[i] * p_i with respect to the flat parameters."""
        Xb = self._check(X)
        p, cache = self._forward(Xb, dropout_rng)
        dz3 = (np.asarray(dp, dtype=float) * p * (1.0 - p))[None, :]
        return self._backward(cache, dz3)[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    def with_flat(self, flat: np.ndarray) -> "MlpPolicy":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong length")
        pieces = []
        offset = 0
        for a in self._arrays():
            pieces.append(flat[offset : offset + a.size].reshape(a.shape))
            offset += a.size
        return MlpPolicy(*pieces, p_drop=self.p_drop)


def init_linear_policy(n_features: int) -> LinearPolicy:
    """Zero-initialized linear policy: every candidate starts at p = 0.5."""
    return LinearPolicy(np.zeros(n_features + 1))


def init_mlp_policy(
    n_features: int,
    rng: np.random.Generator,
    hidden: tuple[int, int] = (32, 16),
    p_drop: float = 0.1,
) -> MlpPolicy:
    """He-initialized hidden layers; small random output layer so the
    initial acceptance probabilities sit near 0.5."""
    d1 = n_features + 1
    h1, h2 = hidden
    w1 = rng.normal(0.0, np.sqrt(2.0 / d1), size=(d1, h1))
    w2 = rng.normal(0.0, np.sqrt(2.0 / h1), size=(h1, h2))
    w3 = rng.normal(0.0, 0.05, size=h2)
    return MlpPolicy(
        w1=w1,
        b1=np.zeros(h1),
        w2=w2,
        b2=np.zeros(h2),
        w3=w3,
        b3=np.zeros(1),
        p_drop=p_drop,
    )


def policy_to_payload(policy) -> dict:
    if isinstance(policy, LinearPolicy):
        return {
            "format_version": _POLICY_FORMAT_VERSION,
            "kind": "linear",
            "theta": policy.theta.tolist(),
        }
    if isinstance(policy, MlpPolicy):
        return {
            "format_version": _POLICY_FORMAT_VERSION,
            "kind": "mlp",
            "p_drop": policy.p_drop,
            "weights": {
                name: getattr(policy, name).tolist()
                for name in ("w1", "b1", "w2", "b2", "w3", "b3")
            },
        }
    raise TypeError(f"unknown policy type {type(policy).__name__}")


def policy_from_payload(payload: dict):
    version = payload.get("format_version")
    if version != _POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format version: {version!r}")
    kind = payload.get("kind")
    if kind == "linear":
        return LinearPolicy(np.asarray(payload["theta"], dtype=float))
    if kind == "mlp":
        w = payload["weights"]
        return MlpPolicy(
            w1=np.asarray(w["w1"], dtype=float),
            b1=np.asarray(w["b1"], dtype=float),
            w2=np.asarray(w["w2"], dtype=float),
            b2=np.asarray(w["b2"], dtype=float),
            w3=np.asarray(w["w3"], dtype=float),
            b3=np.asarray(w["b3"], dtype=float),
            p_drop=float(payload["p_drop"]),
        )
    raise ValueError(f"unknown policy kind: {kind!r}")


def save_policy(policy, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(policy_to_payload(policy), fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_policy(path: str):
    with open(path, encoding="utf-8") as fh:
        return policy_from_payload(json.load(fh))
