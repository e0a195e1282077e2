"""Plot-ready tables and figures rendered from a finished run directory.

``build_report`` flattens ``trace.csv`` into one tidy row per (trace row,
metric) — configuration columns, then ``x``/``metric``/``value`` — and
renders a small set of PNG figures from ``summary.csv``.  Re-running over
the same run directory reproduces ``report.csv`` byte for byte.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .errors import MissingArtifactError
from .experiments import _write_csv

__all__ = [
    "REPORT_COLUMNS",
    "ONE_SHOT_METRICS",
    "SEQUENTIAL_METRICS",
    "tidy_rows",
    "build_report",
]

REPORT_COLUMNS = (
    "setting",
    "policy",
    "c",
    "batch_size",
    "update_period",
    "trial",
    "x",
    "metric",
    "value",
)

ONE_SHOT_METRICS = ("utility", "grad_norm", "accept_rate", "p_dem", "p_eq", "p_overall")
SEQUENTIAL_METRICS = (
    "utility",
    "accept_rate",
    "n_admitted",
    "p_dem",
    "p_eq",
    "p_overall",
    "n_qualified",
)


def _load_run(run_dir: str):
    if os.path.exists(os.path.join(run_dir, "FAILED")):
        raise MissingArtifactError(f"run directory {run_dir!r} holds a failed run")
    manifest_path = os.path.join(run_dir, "manifest.json")
    trace_path = os.path.join(run_dir, "trace.csv")
    summary_path = os.path.join(run_dir, "summary.csv")
    for path in (manifest_path, trace_path, summary_path):
        if not os.path.isfile(path):
            raise MissingArtifactError(f"no completed run in {run_dir!r}: {path} is missing")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return manifest, pd.read_csv(trace_path), pd.read_csv(summary_path)


def tidy_rows(trace: pd.DataFrame, setting: str) -> list[dict]:
    """One row per (trace row, metric), ordered like the trace itself."""
    if setting == "one_shot":
        metrics, x_col = ONE_SHOT_METRICS, "iteration"
    else:
        metrics, x_col = SEQUENTIAL_METRICS, "stage"
    id_cols = [
        col
        for col in ("setting", "policy", "c", "batch_size", "update_period", "trial")
        if col in trace.columns
    ]
    long = trace.melt(
        id_vars=id_cols + [x_col],
        value_vars=[m for m in metrics if m in trace.columns],
        var_name="metric",
        value_name="value",
    ).rename(columns={x_col: "x"})
    for col in ("batch_size", "update_period"):
        if col not in long.columns:
            long[col] = None
    long = long.sort_values(
        by=[c for c in REPORT_COLUMNS if c not in ("value",)],
        kind="stable",
        na_position="last",
    )
    rows = long[list(REPORT_COLUMNS)].to_dict("records")
    for row in rows:
        if row["batch_size"] is not None and pd.isna(row["batch_size"]):
            row["batch_size"] = None
        if row["update_period"] is not None and pd.isna(row["update_period"]):
            row["update_period"] = None
    return rows


# ---------------------------------------------------------------------------
# figures


def _save_fig(fig, path: str) -> None:
    tmp = f"{path}.tmp"
    fig.savefig(tmp, format="png", dpi=110, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)


def _axes_per_cost(costs):
    fig, axes = plt.subplots(
        1, len(costs), figsize=(5.2 * len(costs), 4.0), squeeze=False, sharex=True
    )
    return fig, axes[0]


def _curve_figure(frame, x_label, y_label, title, path, line_cols):
    """One subplot per cost; one mean±stderr band per `line_cols` combo."""
    costs = sorted(frame["c"].unique())
    fig, axes = _axes_per_cost(costs)
    for ax, c in zip(axes, costs):
        sub = frame[frame["c"] == c]
        keys = sorted(map(tuple, sub[line_cols].drop_duplicates().to_numpy().tolist()))
        for key in keys:
            grp = sub
            for col, val in zip(line_cols, key):
                grp = grp[grp[col] == val]
            grp = grp.sort_values("x")
            label = " ".join(str(v) for v in key)
            x = grp["x"].to_numpy(dtype=float)
            mean = grp["mean"].to_numpy(dtype=float)
            err = grp["stderr"].to_numpy(dtype=float)
            (line,) = ax.plot(x, mean, label=label, linewidth=1.4)
            ax.fill_between(x, mean - err, mean + err, alpha=0.2, color=line.get_color())
        ax.set_title(f"{title} (c={c:g})")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)


def _one_shot_figures(summary: pd.DataFrame, out_dir: str) -> list:
    written = []
    train = summary[(summary["phase"] == "train") & (summary["metric"] == "utility")]
    if len(train):
        path = os.path.join(out_dir, "fig_training_utility.png")
        multi_batch = train["batch_size"].nunique() > 1
        cols = ["policy", "batch_size"] if multi_batch else ["policy"]
        _curve_figure(train, "iteration", "estimated utility", "training utility", path, cols)
        written.append(path)

    final = summary[(summary["phase"] == "eval") & (summary["metric"] == "p_overall")]
    if len(final) and final["batch_size"].nunique() > 1:
        costs = sorted(final["c"].unique())
        fig, axes = _axes_per_cost(costs)
        for ax, c in zip(axes, costs):
            sub = final[final["c"] == c]
            for policy in sorted(sub["policy"].unique()):
                grp = sub[sub["policy"] == policy].sort_values("batch_size")
                ax.errorbar(
                    grp["batch_size"],
                    grp["mean"],
                    yerr=grp["stderr"],
                    marker="o",
                    capsize=3,
                    label=policy,
                )
            ax.set_title(f"final fairness penalty (c={c:g})")
            ax.set_xlabel("training batch size")
            ax.set_ylabel("penalty")
            ax.set_xscale("log")
            ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "fig_penalty_vs_batch.png")
        _save_fig(fig, path)
        written.append(path)
    return written


def _sequential_figures(summary: pd.DataFrame, out_dir: str) -> list:
    written = []
    for metric, fname, y_label in (
        ("utility", "fig_stage_utility.png", "realized utility"),
        ("accept_rate", "fig_admission_rate.png", "admission rate"),
    ):
        frame = summary[(summary["phase"] == "stage") & (summary["metric"] == metric)]
        if not len(frame):
            continue
        path = os.path.join(out_dir, fname)
        _curve_figure(frame, "stage", y_label, y_label, path, ["policy"])
        written.append(path)
    return written


def build_report(run_dir: str, out_dir: str | None = None) -> dict:
    """Write ``report.csv`` plus figures for the run at ``run_dir``.

    Returns ``{"report_csv": path, "figures": [paths], "rows": count}``.
    """
    manifest, trace, summary = _load_run(run_dir)
    setting = manifest.get("plan", {}).get("setting", "one_shot")
    out_dir = out_dir or os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)

    rows = tidy_rows(trace, setting)
    report_csv = os.path.join(out_dir, "report.csv")
    _write_csv(report_csv, REPORT_COLUMNS, rows)

    if setting == "one_shot":
        figures = _one_shot_figures(summary, out_dir)
    else:
        figures = _sequential_figures(summary, out_dir)
    return {"report_csv": report_csv, "figures": figures, "rows": len(rows)}
