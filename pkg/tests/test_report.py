"""Tidy report tables and figure rendering from finished run directories."""

import pandas as pd
import pytest

from cohortsel.errors import MissingArtifactError
from cohortsel.report import (
    ONE_SHOT_METRICS,
    REPORT_COLUMNS,
    SEQUENTIAL_METRICS,
    build_report,
    tidy_rows,
)

from conftest import sha256_of


class TestTidyRows:
    def test_cardinality_and_columns(self, one_shot_run):
        plan, out, _ = one_shot_run
        trace = pd.read_csv(out / "trace.csv")
        rows = tidy_rows(trace, "one_shot")
        assert len(rows) == len(trace) * len(ONE_SHOT_METRICS)
        assert set(rows[0]) == set(REPORT_COLUMNS)
        assert all(r["update_period"] is None for r in rows)

    def test_values_survive_melt(self, one_shot_run):
        plan, out, _ = one_shot_run
        trace = pd.read_csv(out / "trace.csv")
        rows = tidy_rows(trace, "one_shot")
        probe = trace.iloc[7]
        matches = [
            r
            for r in rows
            if r["policy"] == probe["policy"]
            and r["trial"] == probe["trial"]
            and r["x"] == probe["iteration"]
            and r["metric"] == "utility"
            and r["batch_size"] == probe["batch_size"]
        ]
        assert len(matches) == 1
        assert matches[0]["value"] == pytest.approx(probe["utility"], rel=1e-12)

    def test_sequential_uses_stage_axis(self, sequential_run):
        plan, out, _ = sequential_run
        trace = pd.read_csv(out / "trace.csv")
        rows = tidy_rows(trace, "sequential")
        assert len(rows) == len(trace) * len(SEQUENTIAL_METRICS)
        assert {r["x"] for r in rows} == {1, 2, 3}
        assert all(r["batch_size"] is None for r in rows)
        assert {r["metric"] for r in rows} == set(SEQUENTIAL_METRICS)


class TestBuildReport:
    def test_one_shot_outputs(self, one_shot_run):
        plan, out, _ = one_shot_run
        result = build_report(str(out))
        report = pd.read_csv(result["report_csv"])
        assert tuple(report.columns) == REPORT_COLUMNS
        assert len(report) == result["rows"]
        # single batch size: only the training-utility figure is rendered
        names = [p.rsplit("/", 1)[-1] for p in result["figures"]]
        assert names == ["fig_training_utility.png"]
        for p in result["figures"]:
            with open(p, "rb") as fh:
                assert fh.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_sequential_outputs(self, sequential_run):
        plan, out, _ = sequential_run
        result = build_report(str(out))
        names = sorted(p.rsplit("/", 1)[-1] for p in result["figures"])
        assert names == ["fig_admission_rate.png", "fig_stage_utility.png"]

    def test_idempotent_csv(self, one_shot_run, tmp_path):
        plan, out, _ = one_shot_run
        first = build_report(str(out), str(tmp_path / "r1"))
        second = build_report(str(out), str(tmp_path / "r2"))
        assert sha256_of(first["report_csv"]) == sha256_of(second["report_csv"])

    def test_custom_out_dir(self, one_shot_run, tmp_path):
        plan, out, _ = one_shot_run
        result = build_report(str(out), str(tmp_path / "elsewhere"))
        assert str(tmp_path / "elsewhere") in result["report_csv"]

    def test_missing_run_rejected(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            build_report(str(tmp_path))

    def test_failed_run_rejected(self, one_shot_run, tmp_path):
        import shutil

        plan, out, _ = one_shot_run
        broken = tmp_path / "failed_run"
        shutil.copytree(out, broken)
        (broken / "FAILED").write_text("RuntimeError: boom\n")
        with pytest.raises(MissingArtifactError, match="failed"):
            build_report(str(broken))
