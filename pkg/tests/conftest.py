import hashlib

import pytest

from cohortsel.experiments import BootstrapConfig, ExperimentPlan, run_bootstrap, run_experiment

ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.write_sep("-", "acceptance summary")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def sha256_of(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="session")
def artifacts_dir(tmp_path_factory):
    """One small bootstrap artifact set shared by the pipeline-level tests."""
    out = tmp_path_factory.mktemp("artifacts")
    run_bootstrap(BootstrapConfig(n_candidates=400, seed=7), str(out))
    return out


@pytest.fixture(scope="session")
def one_shot_run(artifacts_dir, tmp_path_factory):
    """A finished miniature one-shot run: (plan, run_dir, manifest)."""
    plan = ExperimentPlan(
        setting="one_shot",
        costs=(0.05,),
        batch_sizes=(30,),
        policies=("linear", "mlp"),
        trials=2,
        iterations=6,
        n_x=2,
        n_a=4,
        n_y=2,
        eval_batches=2,
        hidden=(8, 4),
        seed=123,
    )
    out = tmp_path_factory.mktemp("run_one_shot")
    manifest = run_experiment(plan, str(artifacts_dir), str(out))
    return plan, out, manifest


@pytest.fixture(scope="session")
def sequential_run(artifacts_dir, tmp_path_factory):
    """A finished miniature sequential run: (plan, run_dir, manifest)."""
    plan = ExperimentPlan(
        setting="sequential",
        costs=(0.05,),
        policies=("linear",),
        baselines=("gpa_threshold", "static_linear"),
        trials=2,
        stages=3,
        stage_pool_size=40,
        train_batch_size=30,
        iterations=4,
        n_x=2,
        n_a=4,
        n_y=2,
        eval_batches=2,
        update_period=1,
        seed=321,
    )
    out = tmp_path_factory.mktemp("run_sequential")
    manifest = run_experiment(plan, str(artifacts_dir), str(out))
    return plan, out, manifest
