"""Synthetic applicant population and the learner's refittable model of it.

Three layers live here:

* A fixed parametric ground truth (``CandidateSchema``): numeric fields
  drawn through a Gaussian copula with clipped Gaussian marginals (some
  shifted by group), independent categorical fields, a Bernoulli
  "historically admitted" label for bootstrap data, and per-course grade
  equations  y_k = clip(intercept + sum_f coef_f * x_f + noise, 0, 4).
  The schema ships as a package data file and never changes during a run.

* Preprocessing (``PreprocessState``): min-max scaling of numerics with
  statistics from a training split, one-hot encoding of categoricals, and
  the candidate's group label carried alongside.  Transforming rows that
  fall outside the fitted range keeps the out-of-range scaled value and
  warns rather than clipping.

* The learner's population model (``PopulationModel``): empirical quantile
  tables per numeric field tied together by a Gaussian-copula correlation
  estimated from normal scores, plus categorical frequency tables.  It is
  refit from scratch on all candidates observed so far (requiring at least
  ``MIN_FIT_ROWS`` rows) and sampled via  z ~ N(0, R),  u = Phi(z),
  x_f = Q_f(u_f).
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from .core import FeatureMatrix

__all__ = [
    "MIN_FIT_ROWS",
    "NumericField",
    "CategoricalField",
    "CourseSpec",
    "CandidateSchema",
    "default_schema",
    "simulate_applicants",
    "simulate_outcomes",
    "PreprocessState",
    "fit_preprocess",
    "split_indices",
    "transform",
    "PopulationModel",
    "fit_population_model",
    "sample_candidates",
    "sample_population",
]

MIN_FIT_ROWS = 30

_QUANTILE_GRID = (np.arange(512) + 0.5) / 512

_SCHEMA_FORMAT_VERSION = 1
_POPMODEL_FORMAT_VERSION = 1
_PREPROCESS_FORMAT_VERSION = 1


def _chol_psd(R: np.ndarray, context: str) -> np.ndarray:
    for eps in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(R + eps * np.eye(R.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise ValueError(f"{context}: correlation matrix is not positive semidefinite")


@dataclass(frozen=True)
class NumericField:
    name: str
    low: float
    high: float
    mean: float
    sd: float
    group_shifts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"field {self.name}: low must be below high")
        if self.sd <= 0:
            raise ValueError(f"field {self.name}: sd must be positive")


@dataclass(frozen=True)
class CategoricalField:
    name: str
    levels: tuple
    probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.levels) != len(self.probs) or not self.levels:
            raise ValueError(f"field {self.name}: levels/probs mismatch")
        if abs(sum(self.probs) - 1.0) > 1e-9 or min(self.probs) < 0:
            raise ValueError(f"field {self.name}: probs must be a distribution")


@dataclass(frozen=True)
class CourseSpec:
    name: str
    intercept: float
    coefficients: dict
    noise_sd: float

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError(f"course {self.name}: noise_sd must be non-negative")


@dataclass(frozen=True)
class CandidateSchema:
    """Fixed ground-truth applicant generator."""

    numeric: tuple
    categorical: tuple
    courses: tuple
    correlation: np.ndarray
    group_field: str = "gender"
    acceptance_rate: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "numeric", tuple(self.numeric))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(self, "courses", tuple(self.courses))
        R = np.array(self.correlation, dtype=float, copy=True)
        F = len(self.numeric)
        if R.shape != (F, F):
            raise ValueError(f"correlation must be {F}x{F}, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-12) or not np.allclose(np.diag(R), 1.0):
            raise ValueError("correlation must be symmetric with unit diagonal")
        _chol_psd(R, "candidate schema")
        R.setflags(write=False)
        object.__setattr__(self, "correlation", R)
        if self.group_field not in self.categorical_names:
            raise ValueError(f"group field {self.group_field!r} is not a categorical field")
        if not 0.0 < self.acceptance_rate < 1.0:
            raise ValueError("acceptance_rate must lie in (0, 1)")
        numeric_names = set(self.numeric_names)
        for course in self.courses:
            unknown = set(course.coefficients) - numeric_names
            if unknown:
                raise ValueError(f"course {course.name}: unknown fields {sorted(unknown)}")

    @property
    def numeric_names(self) -> tuple:
        return tuple(f.name for f in self.numeric)

    @property
    def categorical_names(self) -> tuple:
        return tuple(f.name for f in self.categorical)

    @property
    def course_names(self) -> tuple:
        return tuple(c.name for c in self.courses)

    def to_payload(self) -> dict:
        return {
            "format_version": _SCHEMA_FORMAT_VERSION,
            "group_field": self.group_field,
            "acceptance_rate": self.acceptance_rate,
            "numeric": [
                {
                    "name": f.name,
                    "low": f.low,
                    "high": f.high,
                    "mean": f.mean,
                    "sd": f.sd,
                    "group_shifts": dict(f.group_shifts),
                }
                for f in self.numeric
            ],
            "categorical": [
                {"name": f.name, "levels": list(f.levels), "probs": list(f.probs)}
                for f in self.categorical
            ],
            "correlation": self.correlation.tolist(),
            "courses": [
                {
                    "name": c.name,
                    "intercept": c.intercept,
                    "coefficients": dict(c.coefficients),
                    "noise_sd": c.noise_sd,
                }
                for c in self.courses
            ],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def schema_from_payload(payload: dict) -> CandidateSchema:
    version = payload.get("format_version")
    if version != _SCHEMA_FORMAT_VERSION:
        raise ValueError(f"unsupported schema format version: {version!r}")
    return CandidateSchema(
        numeric=tuple(
            NumericField(
                name=f["name"],
                low=float(f["low"]),
                high=float(f["high"]),
                mean=float(f["mean"]),
                sd=float(f["sd"]),
                group_shifts=dict(f.get("group_shifts", {})),
            )
            for f in payload["numeric"]
        ),
        categorical=tuple(
            CategoricalField(f["name"], tuple(f["levels"]), tuple(f["probs"]))
            for f in payload["categorical"]
        ),
        courses=tuple(
            CourseSpec(
                name=c["name"],
                intercept=float(c["intercept"]),
                coefficients={k: float(v) for k, v in c["coefficients"].items()},
                noise_sd=float(c["noise_sd"]),
            )
            for c in payload["courses"]
        ),
        correlation=np.asarray(payload["correlation"], dtype=float),
        group_field=payload["group_field"],
        acceptance_rate=float(payload["acceptance_rate"]),
    )


def load_schema(path: str) -> CandidateSchema:
    with open(path, encoding="utf-8") as fh:
        return schema_from_payload(json.load(fh))


def default_schema() -> CandidateSchema:
    """The generator shipped with the package (``data/ground_truth.json``)."""
    ref = importlib.resources.files("cohortsel").joinpath("data/ground_truth.json")
    return schema_from_payload(json.loads(ref.read_text(encoding="utf-8")))


def simulate_applicants(schema: CandidateSchema, n: int, rng: np.random.Generator) -> pd.DataFrame:
    """Draw ``n`` applicants from the ground truth.

    Columns: every categorical field, every numeric field, and a 0/1
    ``admitted`` label (historical acceptance, used only for bootstrap
    data).  Draw order is fixed: categoricals, copula normals, admission.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    data = {}
    for f in schema.categorical:
        data[f.name] = rng.choice(f.levels, size=n, p=f.probs)
    F = len(schema.numeric)
    L = _chol_psd(schema.correlation, "candidate schema")
    z = rng.standard_normal((n, F)) @ L.T
    groups = data[schema.group_field]
    for j, fld in enumerate(schema.numeric):
        shift = np.zeros(n)
        for level, delta in fld.group_shifts.items():
            shift[groups == level] = delta
        raw = fld.mean + shift + fld.sd * z[:, j]
        data[fld.name] = np.clip(raw, fld.low, fld.high)
    data["admitted"] = (rng.random(n) < schema.acceptance_rate).astype(int)
    return pd.DataFrame(data)


def simulate_outcomes(
    schema: CandidateSchema, candidates: pd.DataFrame, rng: np.random.Generator
) -> np.ndarray:
    """Raw-scale course grades for each candidate row, shape (n, K)."""
    n = len(candidates)
    out = np.empty((n, len(schema.courses)))
    for k, course in enumerate(schema.courses):
        mean = np.full(n, course.intercept, dtype=float)
        for name, coef in course.coefficients.items():
            mean += coef * candidates[name].to_numpy(dtype=float)
        out[:, k] = np.clip(mean + rng.standard_normal(n) * course.noise_sd, 0.0, 4.0)
    return out


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessState:
    """Frozen encoding recipe: scaling statistics plus one-hot vocabularies."""

    numeric_names: tuple
    mins: np.ndarray
    maxs: np.ndarray
    categorical_levels: dict  # name -> tuple of levels
    group_field: str
    split_ratio: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "numeric_names", tuple(self.numeric_names))
        mins = np.array(self.mins, dtype=float, copy=True)
        maxs = np.array(self.maxs, dtype=float, copy=True)
        if mins.shape != maxs.shape or mins.shape != (len(self.numeric_names),):
            raise ValueError("mins/maxs must have one entry per numeric field")
        if not np.all(mins < maxs):
            raise ValueError("each numeric field needs min < max to be scaled")
        mins.setflags(write=False)
        maxs.setflags(write=False)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(
            self,
            "categorical_levels",
            {k: tuple(v) for k, v in self.categorical_levels.items()},
        )
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")

    @property
    def feature_names(self) -> tuple:
        names = list(self.numeric_names)
        for cat, levels in self.categorical_levels.items():
            names.extend(f"{cat}={lvl}" for lvl in levels)
        return tuple(names)

    def to_payload(self) -> dict:
        return {
            "format_version": _PREPROCESS_FORMAT_VERSION,
            "numeric_names": list(self.numeric_names),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "categorical_levels": {k: list(v) for k, v in self.categorical_levels.items()},
            "group_field": self.group_field,
            "split_ratio": self.split_ratio,
        }


def preprocess_from_payload(payload: dict) -> PreprocessState:
    version = payload.get("format_version")
    if version != _PREPROCESS_FORMAT_VERSION:
        raise ValueError(f"unsupported preprocess format version: {version!r}")
    return PreprocessState(
        numeric_names=tuple(payload["numeric_names"]),
        mins=np.asarray(payload["mins"], dtype=float),
        maxs=np.asarray(payload["maxs"], dtype=float),
        categorical_levels={k: tuple(v) for k, v in payload["categorical_levels"].items()},
        group_field=payload["group_field"],
        split_ratio=float(payload["split_ratio"]),
    )


def split_indices(n: int, ratio: float, rng: np.random.Generator):
    """Shuffled train/test row indices with ``round(ratio * n)`` training rows."""
    perm = rng.permutation(n)
    n_train = int(round(ratio * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def fit_preprocess(
    df: pd.DataFrame,
    numeric_names,
    categorical_names,
    group_field: str,
    split_ratio: float = 0.7,
) -> PreprocessState:
    """Fit scaling statistics and one-hot vocabularies on ``df`` (a train split)."""
    numeric_names = tuple(numeric_names)
    categorical_names = tuple(categorical_names)
    if group_field not in categorical_names:
        raise ValueError(f"group field {group_field!r} must be a categorical column")
    mins = np.array([df[c].min() for c in numeric_names], dtype=float)
    maxs = np.array([df[c].max() for c in numeric_names], dtype=float)
    levels = {c: tuple(sorted(df[c].astype(str).unique())) for c in categorical_names}
    return PreprocessState(
        numeric_names=numeric_names,
        mins=mins,
        maxs=maxs,
        categorical_levels=levels,
        group_field=group_field,
        split_ratio=split_ratio,
    )


def transform(df: pd.DataFrame, state: PreprocessState) -> FeatureMatrix:
    """Encode raw candidate rows with a fitted recipe.

    Numerics are min-max scaled with the fitted statistics; values outside
    the fitted range keep their out-of-range scaled value (a warning is
    emitted).  Categorical levels unseen at fit time one-hot to all zeros,
    also with a warning.
    """
    n = len(df)
    cols = []
    out_of_range = 0
    for j, name in enumerate(state.numeric_names):
        raw = df[name].to_numpy(dtype=float)
        scaled = (raw - state.mins[j]) / (state.maxs[j] - state.mins[j])
        out_of_range += int(((scaled < 0.0) | (scaled > 1.0)).sum())
        cols.append(scaled)
    if out_of_range:
        warnings.warn(
            f"{out_of_range} scaled value(s) fall outside [0, 1]; "
            "kept as-is (fitted range was narrower than the data)",
            stacklevel=2,
        )
    unseen = 0
    for name, levels in state.categorical_levels.items():
        values = df[name].astype(str).to_numpy()
        known = np.isin(values, levels)
        unseen += int((~known).sum())
        for lvl in levels:
            cols.append((values == lvl).astype(float))
    if unseen:
        warnings.warn(
            f"{unseen} categorical value(s) unseen at fit time; one-hot encoded as all zeros",
            stacklevel=2,
        )
    values = np.column_stack(cols) if n else np.empty((0, len(state.feature_names)))
    groups = df[state.group_field].astype(str).to_numpy()
    return FeatureMatrix(values, groups, state.feature_names)


# ---------------------------------------------------------------------------
# the learner's population model


@dataclass(frozen=True)
class PopulationModel:
    """Gaussian copula over empirical numeric marginals, independent categoricals."""

    numeric_names: tuple
    quantile_tables: np.ndarray  # (F, len(_QUANTILE_GRID)), non-decreasing rows
    correlation: np.ndarray  # (F, F)
    categorical: dict  # name -> (levels tuple, probs tuple)
    n_fit: int

    def __post_init__(self):
        object.__setattr__(self, "numeric_names", tuple(self.numeric_names))
        tables = np.array(self.quantile_tables, dtype=float, copy=True)
        R = np.array(self.correlation, dtype=float, copy=True)
        F = len(self.numeric_names)
        if tables.shape != (F, _QUANTILE_GRID.size):
            raise ValueError(f"quantile tables must be ({F}, {_QUANTILE_GRID.size})")
        if R.shape != (F, F):
            raise ValueError("correlation shape does not match the numeric fields")
        tables.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "quantile_tables", tables)
        object.__setattr__(self, "correlation", R)
        object.__setattr__(
            self,
            "categorical",
            {k: (tuple(v[0]), tuple(float(p) for p in v[1])) for k, v in self.categorical.items()},
        )

    def to_payload(self) -> dict:
        return {
            "format_version": _POPMODEL_FORMAT_VERSION,
            "numeric_names": list(self.numeric_names),
            "quantile_tables": self.quantile_tables.tolist(),
            "correlation": self.correlation.tolist(),
            "categorical": {
                k: {"levels": list(v[0]), "probs": list(v[1])} for k, v in self.categorical.items()
            },
            "n_fit": int(self.n_fit),
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def popmodel_from_payload(payload: dict) -> PopulationModel:
    version = payload.get("format_version")
    if version != _POPMODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported population model format version: {version!r}")
    return PopulationModel(
        numeric_names=tuple(payload["numeric_names"]),
        quantile_tables=np.asarray(payload["quantile_tables"], dtype=float),
        correlation=np.asarray(payload["correlation"], dtype=float),
        categorical={
            k: (tuple(v["levels"]), tuple(v["probs"]))
            for k, v in payload["categorical"].items()
        },
        n_fit=int(payload["n_fit"]),
    )


def fit_population_model(
    df: pd.DataFrame, numeric_names, categorical_names, min_rows: int = MIN_FIT_ROWS
) -> PopulationModel:
    """Refit the population model from scratch on all observed candidates.

    Requires at least ``min_rows`` rows (callers keep the previous model
    otherwise).  Numeric marginals become quantile tables; the copula
    correlation is the correlation of normal scores
    z = Phi^{-1}(rank / (n + 1)).  Constant columns get zero correlation
    with everything (with a warning) since their normal scores are
    degenerate.
    """
    numeric_names = tuple(numeric_names)
    categorical_names = tuple(categorical_names)
    n = len(df)
    if n < min_rows:
        raise ValueError(f"population model needs >= {min_rows} rows, got {n}")
    F = len(numeric_names)
    tables = np.empty((F, _QUANTILE_GRID.size))
    scores = np.empty((n, F))
    constant = []
    for j, name in enumerate(numeric_names):
        col = df[name].to_numpy(dtype=float)
        tables[j] = np.quantile(col, _QUANTILE_GRID)
        scores[:, j] = ndtri(rankdata(col, method="average") / (n + 1))
        if np.ptp(col) == 0.0:
            constant.append(name)
    with np.errstate(invalid="ignore"):
        R = np.corrcoef(scores, rowvar=False)
    if F == 1:
        R = np.ones((1, 1))
    for name in constant:
        j = numeric_names.index(name)
        R[j, :] = 0.0
        R[:, j] = 0.0
        R[j, j] = 1.0
    if constant:
        warnings.warn(
            f"constant numeric field(s) {constant}: copula correlation set to zero",
            stacklevel=2,
        )
    if np.isnan(R).any():
        raise ValueError("copula correlation has undefined entries")
    R = 0.5 * (R + R.T)
    categorical = {}
    for name in categorical_names:
        values, counts = np.unique(df[name].astype(str).to_numpy(), return_counts=True)
        categorical[name] = (tuple(values), tuple(counts / n))
    return PopulationModel(
        numeric_names=numeric_names,
        quantile_tables=tables,
        correlation=R,
        categorical=categorical,
        n_fit=n,
    )


def sample_candidates(model: PopulationModel, n: int, rng: np.random.Generator) -> pd.DataFrame:
    """Draw ``n`` raw candidate rows from the fitted model.

    Categoricals first (independent frequency draws), then the copula:
    z ~ N(0, R), u = Phi(z), and each numeric is the empirical quantile of
    its u.  Sampled numerics stay inside the observed range.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    data = {}
    for name, (levels, probs) in model.categorical.items():
        data[name] = rng.choice(levels, size=n, p=probs)
    F = len(model.numeric_names)
    L = _chol_psd(model.correlation, "population model")
    z = rng.standard_normal((n, F)) @ L.T
    u = ndtr(z)
    for j, name in enumerate(model.numeric_names):
        data[name] = np.interp(u[:, j], _QUANTILE_GRID, model.quantile_tables[j])
    return pd.DataFrame(data)


def sample_population(
    model: PopulationModel, n: int, rng: np.random.Generator, prep: PreprocessState
) -> FeatureMatrix:
    """Sample raw candidates and encode them with the fitted recipe."""
    return transform(sample_candidates(model, n, rng), prep)
