"""Command-line surface: ``cohortsel bootstrap | run | report``.

Config and plan files are plain text, one ``key = value`` per line.
``#`` starts a comment, commas separate list items, ``true``/``false``
are booleans and ``none`` clears a value.  Unknown keys are rejected by
name.  ``run --plan`` also accepts a ``manifest.json`` written by a
previous run, which re-executes that run bit-identically.

Exit codes: 0 success, 2 invalid configuration, 3 I/O failure,
4 missing artifact or input file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .errors import ConfigError, MissingArtifactError
from .experiments import BootstrapConfig, plan_from_payload, run_bootstrap, run_experiment

__all__ = ["main", "parse_config_text"]


# ---------------------------------------------------------------------------
# config grammar


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a payload dict."""
    payload = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in payload:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        value = value.strip()
        if "," in value:
            payload[key] = [_parse_scalar(p.strip()) for p in value.split(",") if p.strip()]
        else:
            payload[key] = _parse_scalar(value)
    return payload


def _read_text(path: str) -> str:
    if not os.path.isfile(path):
        raise MissingArtifactError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        return fh.read()


_BOOTSTRAP_KEYS = ("n_candidates", "seed", "split_ratio", "schema_path")


def _bootstrap_config(payload: dict) -> BootstrapConfig:
    unknown = sorted(set(payload) - set(_BOOTSTRAP_KEYS))
    if unknown:
        raise ConfigError(
            f"bootstrap config: unknown key(s) {unknown}; known keys: {list(_BOOTSTRAP_KEYS)}"
        )
    for key in ("n_candidates", "seed"):
        if key in payload and not isinstance(payload[key], int):
            raise ConfigError(f"{key}: expected an integer, got {payload[key]!r}")
    if "split_ratio" in payload:
        if not isinstance(payload["split_ratio"], (int, float)) or isinstance(
            payload["split_ratio"], bool
        ):
            raise ConfigError(f"split_ratio: expected a number, got {payload['split_ratio']!r}")
        payload["split_ratio"] = float(payload["split_ratio"])
    if "schema_path" in payload and payload["schema_path"] is not None:
        if not isinstance(payload["schema_path"], str):
            raise ConfigError(f"schema_path: expected a path, got {payload['schema_path']!r}")
    return BootstrapConfig(**payload)


def _load_plan_payload(path: str):
    """Returns (plan payload, artifacts_dir or None).

    The file is either the plain-text grammar or a JSON document — a bare
    plan payload or a full run manifest (its ``plan`` block is reused).
    """
    text = _read_text(path)
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        if "plan" in obj:
            return dict(obj["plan"]), obj.get("artifacts_dir")
        return dict(obj), None
    payload = parse_config_text(text)
    artifacts_dir = payload.pop("artifacts_dir", None)
    return payload, artifacts_dir


# ---------------------------------------------------------------------------
# commands


def _progress(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def cmd_bootstrap(args) -> None:
    payload = parse_config_text(_read_text(args.config)) if args.config else {}
    if args.seed is not None:
        payload["seed"] = args.seed
    config = _bootstrap_config(payload)
    _progress(f"bootstrap: {config.n_candidates} candidates, seed {config.seed}")
    manifest = run_bootstrap(config, args.out)
    print(
        f"bootstrap written to {args.out} "
        f"({len(manifest['train_rows'])} train / {len(manifest['test_rows'])} test rows, "
        f"schema {manifest['schema_hash']})"
    )


def cmd_run(args) -> None:
    payload, plan_artifacts = _load_plan_payload(args.plan) if args.plan else ({}, None)
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.trials is not None:
        payload["trials"] = args.trials
    if args.fairness_weight is not None:
        payload["fairness_weight"] = args.fairness_weight
    if args.update_period is not None:
        payload["update_period"] = args.update_period
    plan = plan_from_payload(payload)
    artifacts_dir = args.artifacts or plan_artifacts
    if artifacts_dir is None:
        raise ConfigError(
            "no artifacts directory: pass --artifacts or set artifacts_dir in the plan"
        )
    manifest = run_experiment(plan, artifacts_dir, args.out, progress=_progress)
    outputs = ", ".join(sorted(manifest["outputs"]))
    print(f"run written to {args.out} ({outputs}; {manifest['runtime_s']}s)")


def cmd_report(args) -> None:
    from .report import build_report  # defer the matplotlib import

    result = build_report(args.run_dir, args.out)
    print(f"report written to {os.path.dirname(result['report_csv'])} ({result['rows']} rows)")
    for path in result["figures"]:
        print(f"figure: {path}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cohortsel",
        description="Train and evaluate stochastic cohort-selection policies on synthetic admission data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{bootstrap,run,report}")

    b = sub.add_parser(
        "bootstrap",
        help="generate the synthetic applicant history and fit the initial models",
    )
    b.add_argument("--config", help="key = value config file (keys: %s)" % ", ".join(_BOOTSTRAP_KEYS))
    b.add_argument("--out", default="artifacts", help="artifact directory (default: %(default)s)")
    b.add_argument("--seed", type=int, help="override the config seed")
    b.set_defaults(func=cmd_bootstrap)

    r = sub.add_parser("run", help="run a one-shot or sequential experiment")
    r.add_argument(
        "--plan",
        help="key = value plan file, or a manifest.json from a previous run (defaults reproduce the one-shot protocol)",
    )
    r.add_argument("--artifacts", help="bootstrap artifact directory (overrides the plan's artifacts_dir)")
    r.add_argument("--out", default="run", help="run directory (default: %(default)s)")
    r.add_argument("--seed", type=int, help="override the plan seed")
    r.add_argument("--trials", type=int, help="override the trial count")
    r.add_argument(
        "--fairness-weight",
        type=float,
        dest="fairness_weight",
        help="override the fairness penalty weight used during training",
    )
    r.add_argument(
        "--update-period",
        type=int,
        dest="update_period",
        help="override the sequential retraining period (0 = never retrain)",
    )
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="flatten a run into a tidy CSV and render figures")
    p.add_argument("run_dir", help="a completed run directory")
    p.add_argument("--out", help="report directory (default: RUN_DIR/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"cohortsel: config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"cohortsel: missing artifact: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"cohortsel: missing file: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"cohortsel: i/o error: {exc}", file=sys.stderr)
        return 3
    except (TypeError, ValueError) as exc:
        print(f"cohortsel: config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
