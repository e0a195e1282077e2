"""One-shot and sequential admission experiments.

Both settings consume a bootstrap artifact directory (see
:func:`run_bootstrap`) and a frozen :class:`ExperimentPlan`, and write a
run directory containing ``trace.csv`` (every per-iteration or per-stage
row), ``summary.csv`` (per-configuration mean and standard error across
trials, long format), ``evaluation.csv`` (one-shot only: held-out final
evaluations) and ``manifest.json`` (plan snapshot, seeds, artifact hashes,
tool version).  Runs with the same plan, seed and artifacts are
byte-identical; CSV floats are written with ``repr`` (shortest
round-trip), files are written to a temporary name and renamed, and a
``FAILED`` marker is left behind if a run dies partway.

One-shot: policies train against the bootstrap-fitted outcome model on
pools resampled from the train split, then evaluate on pools resampled
from the held-out test split.

Sequential: ``stages`` rounds of admission.  Applicant pools and their
(mostly unobserved) true outcomes are pre-drawn per (trial, stage) and
shared by every method and cost, so methods face identical cohorts.  Per
stage each method selects (the stage-1 rule is a predicted-grade
threshold), observes outcomes of admitted candidates only, records
realized utility and fairness, refits the population model on all
candidates seen and folds the admitted outcomes into the posterior, and —
on its update schedule — retrains its policy against a Thompson draw from
the refreshed posterior, warm-starting from the previous parameters.
Static baselines train once on stage-1 data and are frozen afterwards; the
grade-threshold baseline never trains (an adaptive method with
``update_period = 0`` never retrains either, and reproduces it exactly).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np
import pandas as pd

from . import __version__
from .baselines import FixedMarginalPolicy, freeze, initial_policy_pi0
from .core import FeatureMatrix, UtilityConfig, utility, expected_policy_utility
from .errors import ConfigError, MissingArtifactError
from .fairness import FairnessConfig, evaluate_fairness
from .optimizer import OptimConfig, train
from .outcome_model import (
    RAW_OUTCOME_MAX,
    default_prior,
    load_posterior,
    posterior_predictive_sample,
    posterior_to_payload,
    posterior_update,
    sample_outcomes,
    save_posterior,
    thompson_draw,
)
from .policy import init_linear_policy, init_mlp_policy, policy_to_payload
from .population import (
    default_schema,
    fit_population_model,
    fit_preprocess,
    load_schema,
    popmodel_from_payload,
    preprocess_from_payload,
    sample_population,
    simulate_applicants,
    simulate_outcomes,
    split_indices,
    transform,
)
from .rng import generator, seed_sequence

__all__ = [
    "BootstrapConfig",
    "ExperimentPlan",
    "Artifacts",
    "StageRecord",
    "run_bootstrap",
    "load_artifacts",
    "run_experiment",
    "run_one_shot",
    "run_sequential",
    "aggregate",
    "plan_from_payload",
]

_MANIFEST_FORMAT_VERSION = 1

TRACE_COLUMNS_ONE_SHOT = (
    "setting",
    "policy",
    "c",
    "batch_size",
    "trial",
    "iteration",
    "utility",
    "grad_norm",
    "accept_rate",
    "p_dem",
    "p_eq",
    "p_overall",
    "skipped",
)

EVAL_COLUMNS = (
    "setting",
    "policy",
    "c",
    "batch_size",
    "trial",
    "utility",
    "utility_stderr",
    "accept_rate",
    "p_dem",
    "p_eq",
    "p_overall",
)

TRACE_COLUMNS_SEQUENTIAL = (
    "setting",
    "policy",
    "c",
    "update_period",
    "trial",
    "stage",
    "pool_size",
    "n_admitted",
    "accept_rate",
    "utility",
    "p_dem",
    "p_eq",
    "p_overall",
    "n_qualified",
    "trained",
    "policy_version",
    "posterior_version",
    "popmodel_version",
)

SUMMARY_COLUMNS = (
    "setting",
    "policy",
    "c",
    "batch_size",
    "update_period",
    "phase",
    "x",
    "metric",
    "mean",
    "stderr",
    "n_trials",
)


# ---------------------------------------------------------------------------
# serialization helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: str, columns, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in columns])
    os.replace(tmp, path)


def _write_json(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _payload_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _seed_int(root_seed: int, *path) -> int:
    return int(seed_sequence(root_seed, *path).generate_state(1)[0])


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapConfig:
    """Synthetic historical dataset generation knobs."""

    n_candidates: int = 1000
    seed: int = 0
    split_ratio: float = 0.7
    schema_path: str | None = None

    def __post_init__(self):
        if self.n_candidates < 10:
            raise ConfigError(
                f"n_candidates: need at least 10 rows to bootstrap, got {self.n_candidates}"
            )
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split_ratio: must lie in (0, 1), got {self.split_ratio}")


def run_bootstrap(config: BootstrapConfig, out_dir: str) -> dict:
    """Generate the historical dataset and fit every stage-0 artifact.

    Writes ``candidates.csv`` (raw fields + 0/1 ``admitted``),
    ``outcomes.csv`` (course grades for admitted rows only),
    ``schema.json``, ``preprocess.json``, ``population_model.json``,
    ``posterior.json`` and ``bootstrap_manifest.json`` (seed, split
    indices, content hashes).  Returns the manifest payload.
    """
    schema = load_schema(config.schema_path) if config.schema_path else default_schema()
    seed = config.seed
    df = simulate_applicants(schema, config.n_candidates, generator(seed, "bootstrap", "applicants"))
    admitted_idx = np.flatnonzero(df["admitted"].to_numpy() == 1)
    y_admitted = simulate_outcomes(
        schema, df.iloc[admitted_idx], generator(seed, "bootstrap", "outcomes")
    )
    train_idx, test_idx = split_indices(
        config.n_candidates, config.split_ratio, generator(seed, "bootstrap", "split")
    )
    train_df = df.iloc[train_idx]
    prep = fit_preprocess(
        train_df,
        schema.numeric_names,
        schema.categorical_names,
        schema.group_field,
        config.split_ratio,
    )
    adm_train = np.intersect1d(admitted_idx, train_idx)
    pos_in_admitted = np.searchsorted(admitted_idx, adm_train)
    X_fit = transform(df.iloc[adm_train], prep)
    posterior = posterior_update(
        default_prior(len(prep.feature_names), n_courses=len(schema.courses)),
        X_fit,
        y_admitted[pos_in_admitted],
    )
    popmodel = fit_population_model(train_df, schema.numeric_names, schema.categorical_names)

    os.makedirs(out_dir, exist_ok=True)
    df.to_csv(os.path.join(out_dir, "candidates.csv"), index_label="row")
    out_frame = pd.DataFrame(y_admitted, columns=schema.course_names)
    out_frame.insert(0, "row", admitted_idx)
    out_frame.to_csv(os.path.join(out_dir, "outcomes.csv"), index=False)
    _write_json(os.path.join(out_dir, "schema.json"), schema.to_payload())
    _write_json(os.path.join(out_dir, "preprocess.json"), prep.to_payload())
    _write_json(os.path.join(out_dir, "population_model.json"), popmodel.to_payload())
    save_posterior(posterior, os.path.join(out_dir, "posterior.json"))

    file_names = (
        "candidates.csv",
        "outcomes.csv",
        "schema.json",
        "preprocess.json",
        "population_model.json",
        "posterior.json",
    )
    manifest = {
        "format_version": _MANIFEST_FORMAT_VERSION,
        "tool": f"cohortsel {__version__}",
        "kind": "bootstrap",
        "seed": seed,
        "n_candidates": config.n_candidates,
        "split_ratio": config.split_ratio,
        "schema_hash": schema.content_hash(),
        "train_rows": [int(i) for i in train_idx],
        "test_rows": [int(i) for i in test_idx],
        "files": {name: _file_sha256(os.path.join(out_dir, name)) for name in file_names},
    }
    _write_json(os.path.join(out_dir, "bootstrap_manifest.json"), manifest)
    return manifest


@dataclass(frozen=True)
class Artifacts:
    """Loaded bootstrap outputs."""

    schema: object
    candidates: pd.DataFrame
    admitted_rows: np.ndarray
    outcomes_admitted: np.ndarray  # aligned with admitted_rows
    prep: object
    popmodel: object
    posterior: object
    train_rows: np.ndarray
    test_rows: np.ndarray
    manifest: dict


def load_artifacts(artifacts_dir: str) -> Artifacts:
    manifest_path = os.path.join(artifacts_dir, "bootstrap_manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifactError(f"no bootstrap manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for name in ("candidates.csv", "outcomes.csv", "schema.json", "preprocess.json",
                 "population_model.json", "posterior.json"):
        if not os.path.exists(os.path.join(artifacts_dir, name)):
            raise MissingArtifactError(f"bootstrap artifact missing: {name}")
    schema = load_schema(os.path.join(artifacts_dir, "schema.json"))
    candidates = pd.read_csv(os.path.join(artifacts_dir, "candidates.csv"), index_col="row")
    outcomes = pd.read_csv(os.path.join(artifacts_dir, "outcomes.csv"))
    with open(os.path.join(artifacts_dir, "preprocess.json"), encoding="utf-8") as fh:
        prep = preprocess_from_payload(json.load(fh))
    with open(os.path.join(artifacts_dir, "population_model.json"), encoding="utf-8") as fh:
        popmodel = popmodel_from_payload(json.load(fh))
    posterior = load_posterior(os.path.join(artifacts_dir, "posterior.json"))
    return Artifacts(
        schema=schema,
        candidates=candidates,
        admitted_rows=outcomes["row"].to_numpy(),
        outcomes_admitted=outcomes[list(schema.course_names)].to_numpy(dtype=float),
        prep=prep,
        popmodel=popmodel,
        posterior=posterior,
        train_rows=np.asarray(manifest["train_rows"], dtype=int),
        test_rows=np.asarray(manifest["test_rows"], dtype=int),
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ExperimentPlan:
    """Frozen description of a full experiment."""

    setting: str = "one_shot"
    costs: tuple = (0.001, 0.1)
    batch_sizes: tuple = (100,)
    policies: tuple = ("linear", "mlp")
    baselines: tuple = ()
    trials: int = 10
    iterations: int = 1000
    stages: int = 10
    stage_pool_size: int = 300
    train_batch_size: int = 100
    update_period: int = 1
    n_x: int = 4
    n_a: int = 8
    n_y: int = 8
    eta_linear: float = 0.05
    eta_mlp: float = 0.005
    hidden: tuple = (32, 16)
    p_drop: float = 0.1
    baseline_mode: str = "none"
    fairness_weight: float = 0.0
    fairness_epsilon: float = 0.05
    tau: float | None = None
    lambda_dem: float = 1.0
    lambda_eq: float = 1.0
    combine_mode: str = "weighted_sum"
    eval_batches: int = 20
    warm_start: bool = True
    gpa_threshold: float = 2.5
    epsilon_log: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "baselines", tuple(self.baselines))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.setting not in ("one_shot", "sequential"):
            raise ConfigError(f"setting: must be one_shot or sequential, got {self.setting!r}")
        if not self.costs or any(c < 0 for c in self.costs):
            raise ConfigError("costs: need a non-empty list of non-negative values")
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch_sizes: need a non-empty list of positive sizes")
        for p in self.policies:
            if p not in ("linear", "mlp"):
                raise ConfigError(f"policies: unknown policy kind {p!r}")
        for b in self.baselines:
            if b not in ("static_linear", "static_mlp", "gpa_threshold"):
                raise ConfigError(f"baselines: unknown baseline {b!r}")
        if not self.policies and not self.baselines:
            raise ConfigError("policies: need at least one method")
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations: must be >= 1")
        if self.stages < 1:
            raise ConfigError("stages: must be >= 1")
        if self.stage_pool_size < 1 or self.train_batch_size < 1:
            raise ConfigError("stage_pool_size/train_batch_size: must be >= 1")
        if self.update_period < 0:
            raise ConfigError("update_period: must be >= 0 (0 = never retrain)")
        if self.eval_batches < 2:
            raise ConfigError("eval_batches: must be >= 2")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ConfigError("hidden: need two positive layer widths")

    def utility_config(self, c: float) -> UtilityConfig:
        return UtilityConfig(c=c, epsilon_log=self.epsilon_log)

    def fairness_config(self) -> FairnessConfig:
        return FairnessConfig(
            epsilon=self.fairness_epsilon,
            tau=self.tau,
            lambda_dem=self.lambda_dem,
            lambda_eq=self.lambda_eq,
            combine_mode=self.combine_mode,
            emc_n_x=self.n_x,
            emc_n_a=self.n_a,
            emc_n_y=self.n_y,
        )

    def optim_config(self, kind: str, c_idx: int, seed_path: tuple) -> OptimConfig:
        base = kind.replace("static_", "")
        return OptimConfig(
            eta=self.eta_linear if base == "linear" else self.eta_mlp,
            iterations=self.iterations,
            n_x=self.n_x,
            n_a=self.n_a,
            n_y=self.n_y,
            method="sgd" if base == "linear" else "adam",
            baseline_mode=self.baseline_mode,
            fairness_weight=self.fairness_weight,
            seed=_seed_int(self.seed, *seed_path),
        )

    def to_payload(self) -> dict:
        payload = {}
        for f in fields(self):
            v = getattr(self, f.name)
            payload[f.name] = list(v) if isinstance(v, tuple) else v
        return payload


def plan_from_payload(payload: dict) -> ExperimentPlan:
    known = {f.name for f in fields(ExperimentPlan)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"plan: unknown key(s) {sorted(unknown)}")
    kwargs = dict(payload)
    for name in ("costs", "batch_sizes", "policies", "baselines", "hidden"):
        if name not in kwargs:
            continue
        v = kwargs[name]
        if v is None:
            v = ()
        elif isinstance(v, (str, int, float)):
            v = (v,)
        kwargs[name] = tuple(v)
    return ExperimentPlan(**kwargs)


def _init_policy(kind: str, n_features: int, plan: ExperimentPlan, init_rng):
    base = kind.replace("static_", "")
    if base == "linear":
        return init_linear_policy(n_features)
    return init_mlp_policy(n_features, init_rng, hidden=plan.hidden, p_drop=plan.p_drop)


# ---------------------------------------------------------------------------
# one-shot


def run_one_shot(plan: ExperimentPlan, artifacts: Artifacts, progress=None):
    """Train/evaluate every (policy, cost, batch size, trial) cell.

    Returns (trace_rows, eval_rows, summary_rows).
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        X_train = transform(artifacts.candidates.iloc[artifacts.train_rows], artifacts.prep)
        X_test = transform(artifacts.candidates.iloc[artifacts.test_rows], artifacts.prep)
    n_features = len(artifacts.prep.feature_names)
    fcfg = plan.fairness_config()
    trace_rows, eval_rows = [], []

    def resampler(X: FeatureMatrix, batch: int):
        def sampler(rng):
            return X.subset(rng.integers(0, X.n, size=batch))
        return sampler

    def model_sampler(X, rng):
        return posterior_predictive_sample(artifacts.posterior, X, rng)

    for pk_i, kind in enumerate(plan.policies):
        for c_i, c in enumerate(plan.costs):
            ucfg = plan.utility_config(c)
            for b_i, batch in enumerate(plan.batch_sizes):
                for trial in range(plan.trials):
                    cell = ("one_shot", pk_i, c_i, b_i, trial)
                    if progress:
                        progress(f"one_shot {kind} c={c} batch={batch} trial={trial}")
                    policy = _init_policy(
                        kind, n_features, plan, generator(plan.seed, *cell, "init")
                    )
                    ocfg = plan.optim_config(kind, c_i, (*cell, "train"))
                    policy, trace = train(
                        policy, resampler(X_train, batch), model_sampler, ucfg, ocfg, fcfg
                    )
                    base = {
                        "setting": "one_shot",
                        "policy": kind,
                        "c": c,
                        "batch_size": batch,
                        "trial": trial,
                    }
                    for r in trace.rows:
                        trace_rows.append(
                            {
                                **base,
                                "iteration": r.iteration,
                                "utility": r.utility,
                                "grad_norm": r.grad_norm,
                                "accept_rate": r.accept_rate,
                                "p_dem": r.p_dem,
                                "p_eq": r.p_eq,
                                "p_overall": r.p_overall,
                                "skipped": r.skipped,
                            }
                        )
                    eval_rng = generator(plan.seed, *cell, "eval")
                    est, se = expected_policy_utility(
                        policy,
                        resampler(X_test, batch),
                        model_sampler,
                        ucfg,
                        n_x=plan.eval_batches,
                        n_a=plan.n_a,
                        n_y=plan.n_y,
                        rng=eval_rng,
                        return_stderr=True,
                    )
                    reports = [
                        evaluate_fairness(
                            policy,
                            X_test.subset(eval_rng.integers(0, X_test.n, size=batch)),
                            model_sampler,
                            ucfg,
                            fcfg,
                            eval_rng,
                        )
                        for _ in range(plan.eval_batches)
                    ]
                    eval_rows.append(
                        {
                            **base,
                            "utility": est,
                            "utility_stderr": se,
                            "accept_rate": float(policy.accept_prob(X_test).mean()),
                            "p_dem": float(np.mean([r.p_dem for r in reports])),
                            "p_eq": float(np.mean([r.p_eq for r in reports])),
                            "p_overall": float(np.mean([r.p_overall for r in reports])),
                        }
                    )

    key_cols = ("setting", "policy", "c", "batch_size")
    metrics = ("utility", "accept_rate", "p_dem", "p_eq", "p_overall")
    summary_rows = aggregate(trace_rows, key_cols, "iteration", metrics, phase="train")
    summary_rows += aggregate(
        eval_rows, key_cols, None, metrics + ("utility_stderr",), phase="eval",
        fixed_x=plan.iterations,
    )
    return trace_rows, eval_rows, summary_rows


# ---------------------------------------------------------------------------
# sequential


@dataclass(frozen=True)
class StageRecord:
    """Everything recorded about one method's pass through one stage."""

    policy: str
    c: float
    update_period: int
    trial: int
    stage: int
    pool_size: int
    n_admitted: int
    accept_rate: float
    utility: float
    p_dem: float
    p_eq: float
    p_overall: float
    n_qualified: int
    trained: bool
    policy_version: str
    posterior_version: str
    popmodel_version: str

    def to_row(self) -> dict:
        return {"setting": "sequential", **self.__dict__}


def run_sequential(plan: ExperimentPlan, artifacts: Artifacts, progress=None):
    """Multi-stage admission for every (method, cost, trial).

    Returns (trace_rows, summary_rows).  Methods are the adaptive policy
    kinds in ``plan.policies`` plus the frozen baselines in
    ``plan.baselines``; pools are shared across methods and costs within a
    (trial, stage).
    """
    schema = artifacts.schema
    prep = artifacts.prep
    n_features = len(prep.feature_names)
    fcfg = plan.fairness_config()
    methods = tuple(plan.policies) + tuple(plan.baselines)
    trace_rows = []

    for trial in range(plan.trials):
        pools = {}
        for t in range(1, plan.stages + 1):
            df_t = simulate_applicants(
                schema, plan.stage_pool_size, generator(plan.seed, "sequential", trial, "stage", t, "pool")
            ).drop(columns=["admitted"])
            y_t = simulate_outcomes(
                schema, df_t, generator(plan.seed, "sequential", trial, "stage", t, "observe")
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                X_t = transform(df_t, prep)
            pools[t] = (df_t, X_t, y_t)

        for c_i, c in enumerate(plan.costs):
            ucfg = plan.utility_config(c)
            for method in methods:
                if progress:
                    progress(f"sequential {method} c={c} trial={trial}")
                is_baseline = method in plan.baselines
                update_period = 0 if is_baseline else plan.update_period
                history = artifacts.candidates.iloc[artifacts.train_rows].drop(
                    columns=["admitted"]
                )
                posterior = artifacts.posterior
                popmodel = artifacts.popmodel
                policy = None
                policy_version = "pi0"
                for t in range(1, plan.stages + 1):
                    df_t, X_t, y_t = pools[t]
                    if policy is None:
                        a = initial_policy_pi0(artifacts.posterior, X_t, plan.gpa_threshold)
                    else:
                        a = policy.sample_actions(
                            X_t, generator(plan.seed, "sequential", c_i, trial, "stage", t, "select", method)
                        )
                    admitted = np.flatnonzero(a == 1)
                    y_obs_norm = np.zeros_like(y_t)
                    y_obs_norm[admitted] = y_t[admitted] / RAW_OUTCOME_MAX
                    realized = utility(a, y_obs_norm, ucfg)
                    fair_policy = policy if policy is not None else FixedMarginalPolicy(a.astype(float))
                    report = evaluate_fairness(
                        fair_policy,
                        X_t,
                        lambda X, rng: posterior_predictive_sample(posterior, X, rng),
                        ucfg,
                        fcfg,
                        generator(plan.seed, "sequential", trial, "stage", t, "eval"),
                    )
                    # refits happen after selection; versions entering the
                    # stage are what the decisions used
                    record = StageRecord(
                        policy=method,
                        c=c,
                        update_period=update_period,
                        trial=trial,
                        stage=t,
                        pool_size=X_t.n,
                        n_admitted=int(a.sum()),
                        accept_rate=float(a.mean()),
                        utility=realized,
                        p_dem=report.p_dem,
                        p_eq=report.p_eq,
                        p_overall=report.p_overall,
                        n_qualified=report.n_qualified,
                        trained=False,
                        policy_version=policy_version,
                        posterior_version=_payload_hash(posterior_to_payload(posterior)),
                        popmodel_version=popmodel.content_hash(),
                    )
                    history = pd.concat([history, df_t], ignore_index=True)
                    try:
                        popmodel = fit_population_model(
                            history, schema.numeric_names, schema.categorical_names
                        )
                    except ValueError:
                        warnings.warn("population refit failed; keeping previous model", stacklevel=2)
                    posterior = posterior_update(posterior, X_t.subset(admitted), y_t[admitted])

                    retrain = (
                        (is_baseline and method != "gpa_threshold" and t == 1)
                        or (not is_baseline and update_period > 0 and t % update_period == 0)
                    )
                    if retrain:
                        reg = thompson_draw(
                            posterior,
                            generator(plan.seed, "sequential", c_i, trial, "stage", t, "thompson", method),
                        )
                        if policy is None or not plan.warm_start:
                            policy = _init_policy(
                                method,
                                n_features,
                                plan,
                                generator(plan.seed, "sequential", c_i, trial, "init", method),
                            )
                        ocfg = plan.optim_config(
                            method, c_i, ("sequential", c_i, trial, "stage", t, "train", method)
                        )

                        def pool_sampler(rng, popmodel=popmodel):
                            # the refit model may extend past the original
                            # preprocessing range; that is expected here
                            with warnings.catch_warnings():
                                warnings.simplefilter("ignore")
                                return sample_population(
                                    popmodel, plan.train_batch_size, rng, prep
                                )

                        policy, _ = train(
                            policy,
                            pool_sampler,
                            lambda X, rng: sample_outcomes(reg, X, rng),
                            ucfg,
                            ocfg,
                            fcfg,
                        )
                        if is_baseline:
                            policy = freeze(policy)
                        policy_version = _payload_hash(policy_to_payload(policy))
                        record = replace(record, trained=True)
                    trace_rows.append(record.to_row())

    summary_rows = aggregate(
        trace_rows,
        ("setting", "policy", "c", "update_period"),
        "stage",
        ("utility", "accept_rate", "p_dem", "p_eq", "p_overall"),
        phase="stage",
    )
    return trace_rows, summary_rows


# ---------------------------------------------------------------------------
# aggregation and the run driver


def aggregate(rows, key_cols, x_col, metrics, phase: str = "", fixed_x=None):
    """Long-format mean/standard-error rows per configuration and x value.

    The standard error is the sample standard deviation across trials over
    sqrt(n); a single trial yields 0.
    """
    groups = {}
    for row in rows:
        key = tuple(row[k] for k in key_cols)
        x = row[x_col] if x_col is not None else fixed_x
        groups.setdefault((key, x), []).append(row)
    out = []
    for (key, x), members in sorted(groups.items(), key=lambda kv: (tuple(map(str, kv[0][0])), kv[0][1])):
        base = dict(zip(key_cols, key))
        for metric in metrics:
            values = np.array([m[metric] for m in members], dtype=float)
            mean = float(values.mean())
            stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
            out.append(
                {
                    "setting": base.get("setting", ""),
                    "policy": base.get("policy", ""),
                    "c": base.get("c", ""),
                    "batch_size": base.get("batch_size", ""),
                    "update_period": base.get("update_period", ""),
                    "phase": phase,
                    "x": x,
                    "metric": metric,
                    "mean": mean,
                    "stderr": stderr,
                    "n_trials": values.size,
                }
            )
    return out


def run_experiment(plan: ExperimentPlan, artifacts_dir: str, out_dir: str, progress=None) -> dict:
    """Execute a plan end to end and write the run directory.

    Returns the manifest payload.  A ``FAILED`` marker file is written if
    anything raises mid-run.
    """
    artifacts = load_artifacts(artifacts_dir)
    os.makedirs(out_dir, exist_ok=True)
    marker = os.path.join(out_dir, "FAILED")
    started = time.perf_counter()
    try:
        if plan.setting == "one_shot":
            trace_rows, eval_rows, summary_rows = run_one_shot(plan, artifacts, progress)
            _write_csv(os.path.join(out_dir, "trace.csv"), TRACE_COLUMNS_ONE_SHOT, trace_rows)
            _write_csv(os.path.join(out_dir, "evaluation.csv"), EVAL_COLUMNS, eval_rows)
        else:
            trace_rows, summary_rows = run_sequential(plan, artifacts, progress)
            _write_csv(os.path.join(out_dir, "trace.csv"), TRACE_COLUMNS_SEQUENTIAL, trace_rows)
        _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary_rows)
    except BaseException as exc:
        with open(marker, "w", encoding="utf-8") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n")
        raise
    if os.path.exists(marker):
        os.remove(marker)
    outputs = ["trace.csv", "summary.csv"] + (
        ["evaluation.csv"] if plan.setting == "one_shot" else []
    )
    manifest = {
        "format_version": _MANIFEST_FORMAT_VERSION,
        "tool": f"cohortsel {__version__}",
        "kind": "run",
        "plan": plan.to_payload(),
        "seed": plan.seed,
        "artifacts_dir": os.path.abspath(artifacts_dir),
        "artifact_hashes": dict(artifacts.manifest.get("files", {})),
        "schema_hash": artifacts.schema.content_hash(),
        "outputs": {name: _file_sha256(os.path.join(out_dir, name)) for name in outputs},
        "runtime_s": round(time.perf_counter() - started, 3),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest
