"""Batch command line front end.

Every subcommand writes its artifacts atomically and leaves a manifest
beside the main artifact (``<stem>.manifest.json``) holding the content
hashes of inputs and outputs, the seed, the arguments and library
versions. Failures print a JSON error object on stderr and exit with the
error class's code.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .counterfactual import PolicyChange, regression_counterfactual
from .diagnostics import dfbeta, records_frame, state_influence
from .epi import CohortSpec, SirConfig, generate_cohort, run_recovery
from .errors import PolicyPanelError
from .ols import RegressionSpec, design_from_spec, fit_ols, summarize
from .panel import (EMPLOYEES_ONLY, PUBLIC, CorrectionSet, PanelDataset, apply_corrections,
                    bundled_corrections, load_panel)
from .placebo import PlaceboConfig, run_placebo

logger = logging.getLogger("policypanel")

ENV_PREFIX = "POLICYPANEL_"
GLOBAL_FLAGS = ("panel", "schema", "corrections", "spec", "seed", "out_dir", "format", "out")
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_UNEXPECTED = 1


class UsageError(Exception):
    exit_code = EXIT_USAGE


# -- io helpers -------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path: str | Path, data: str | bytes) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _iso_dates(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    for c in out.columns:
        if pd.api.types.is_datetime64_any_dtype(out[c]):
            out[c] = out[c].dt.strftime("%Y-%m-%d")
    return out


def _csv(frame: pd.DataFrame) -> str:
    return _iso_dates(frame).to_csv(index=False, lineterminator="\n", float_format="%.17g")


def _json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v: Any):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (pd.Timestamp, dt.date)):
        return v.strftime("%Y-%m-%d")
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    return json.loads(_iso_dates(frame).to_json(orient="records", double_precision=15))


# -- run context ------------------------------------------------------------

class Run:
    """Collects inputs and outputs of one invocation for its manifest."""

    def __init__(self, args: argparse.Namespace, default_name: str):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        default = Path(default_name)
        # text falls back to the command's default format except for estimate
        suffix = {"csv": ".csv", "json": ".json"}.get(args.format)
        if args.format == "text" and args.command == "estimate":
            suffix = ".txt"
        if suffix:
            default = default.with_suffix(suffix)
        out = Path(args.out) if args.out else default
        if not out.is_absolute() and args.out_dir:
            out = Path(args.out_dir) / out
        self.main = out

    def sibling(self, suffix: str) -> Path:
        return self.main.with_name(self.main.stem + suffix)

    def read(self, path: str | None, what: str) -> Path:
        if not path:
            raise UsageError(f"--{what} is required for {self.args.command}")
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"{what} file not found: {path}")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def write(self, path: Path, data: str | bytes) -> None:
        atomic_write(path, data)
        self.outputs[str(path)] = sha256_file(path)

    def manifest(self) -> dict[str, Any]:
        argv = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "verbose")}
        return {
            "tool": "policypanel",
            "version": __version__,
            "command": self.args.command,
            "seed": self.args.seed,
            "arguments": argv,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "pandas": pd.__version__, "scipy": scipy.__version__},
        }

    def finish(self) -> None:
        atomic_write(self.sibling(".manifest.json"), _json(self.manifest()))


def _panel(run: Run) -> PanelDataset:
    args = run.args
    panel = load_panel(run.read(args.panel, "panel"), run.read(args.schema, "schema"))
    if args.corrections:
        if args.corrections == "bundled":
            corrections = bundled_corrections()
        else:
            corrections = CorrectionSet.from_csv(run.read(args.corrections, "corrections"))
        panel = apply_corrections(panel, corrections)
    return panel


def _spec(run: Run) -> RegressionSpec:
    return RegressionSpec.from_json(run.read(run.args.spec, "spec"))


def _sir(run: Run) -> tuple[SirConfig, CohortSpec]:
    args = run.args
    if args.config:
        with open(run.read(args.config, "config")) as fh:
            doc = json.load(fh)
    else:
        doc = {}
    config = SirConfig.from_dict(doc.get("sir", doc))
    cohort_doc = dict(doc.get("cohort", {}))
    if args.seed is not None:
        cohort_doc["seed"] = args.seed
    return config, CohortSpec.from_dict(cohort_doc)


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


# -- subcommands ------------------------------------------------------------

def cmd_estimate(args: argparse.Namespace) -> Run:
    run = Run(args, "estimate.csv")
    panel, spec = _panel(run), _spec(run)
    _, design = design_from_spec(panel, spec)
    fit = fit_ols(design)
    report = summarize(fit)
    frame = report.to_frame()
    text = report.to_text(spec.name)
    fmt = args.format or "csv"
    if fmt == "csv":
        run.write(run.main, _csv(frame))
    elif fmt == "json":
        run.write(run.main, _json({"coefficients": _records(report.rows), "footer": report.footer}))
    else:
        run.write(run.main, text)
    if fmt != "text":
        run.write(run.sibling(".txt"), text)
    return run


def cmd_influence(args: argparse.Namespace) -> Run:
    run = Run(args, "influence.csv")
    panel, spec = _panel(run), _spec(run)
    _, design = design_from_spec(panel, spec)
    fit = fit_ols(design)
    targets = args.coef or [c for c, r in zip(fit.column_names, fit.column_roles) if r == "policy"]
    if not targets:
        raise UsageError("no --coef given and the spec has no policy-role regressors")
    records = [r for t in targets for r in dfbeta(fit, design, t)]
    frame = records_frame(records)
    ranking = state_influence(records)
    if (args.format or "csv") == "json":
        run.write(run.main, _json(_records(frame)))
    else:
        run.write(run.main, _csv(frame))
    summary = {
        "n_obs": fit.n_obs,
        "coefficients": {t: fit.coef(t) for t in targets},
        "states": {t: _records(g.drop(columns="target")) for t, g in ranking.groupby("target")},
    }
    run.write(run.sibling("_summary.json"), _json(summary))
    return run


def cmd_placebo(args: argparse.Namespace) -> Run:
    run = Run(args, "placebo.csv")
    panel, spec = _panel(run), _spec(run)
    config = PlaceboConfig(spec=spec, n_reps=args.reps, seed=args.seed or 0,
                           permuted_columns=tuple(args.permute), coefficients=tuple(args.coef or ()))
    result = run_placebo(panel, config, n_jobs=args.jobs)
    frame = result.estimates.reset_index()
    frame.insert(1, "failed", result.failed.astype(int))
    frame["donors"] = [";".join(p) for p in result.permutations]
    if (args.format or "csv") == "json":
        run.write(run.main, _json(_records(frame)))
    else:
        run.write(run.main, _csv(frame))
    summary = {
        "n_reps": result.n_reps,
        "n_failed": result.n_failed,
        "seed": result.seed,
        "observed": result.base_estimates,
        "summary": _records(result.summary()),
    }
    run.write(run.sibling("_summary.json"), _json(summary))
    return run


def cmd_simulate(args: argparse.Namespace) -> Run:
    run = Run(args, "cohort.csv")
    config, cohort = _sir(run)
    paths = generate_cohort(config, cohort)
    frame = pd.concat([p.to_frame() for p in paths], ignore_index=True)
    if (args.format or "csv") == "json":
        run.write(run.main, _json(_records(frame)))
    else:
        run.write(run.main, _csv(frame))
    return run


def cmd_validate(args: argparse.Namespace) -> Run:
    run = Run(args, "recovery.csv")
    config, cohort = _sir(run)
    frame = run_recovery(config, cohort, lag=args.lag, n_cohorts=args.cohorts)
    if (args.format or "csv") == "json":
        run.write(run.main, _json(_records(frame)))
    else:
        run.write(run.main, _csv(frame))
    return run


def cmd_counterfactual(args: argparse.Namespace) -> Run:
    run = Run(args, "cf.json")
    panel, spec = _panel(run), _spec(run)
    _, design = design_from_spec(panel, spec)
    fit = fit_ols(design)
    start = args.from_date or panel.dates[0].date()
    change = PolicyChange(args.remove, args.value, start, tuple(args.states or ()))
    feedback = {"auto": None, "on": True, "off": False}[args.national_feedback]
    result = regression_counterfactual(fit, panel, spec, change, draws=args.draws,
                                       level=args.level, seed=args.seed or 0,
                                       national_feedback=feedback, report_states=args.report_states)
    if (args.format or "json") == "csv":
        run.write(run.main, _csv(result.to_frame()))
    else:
        run.write(run.main, result.to_json() + "\n")
    return run


# -- parser -----------------------------------------------------------------

def _global_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--panel", help="panel CSV with state,date and schema columns")
    g.add_argument("--schema", help="JSON mapping column -> role")
    g.add_argument("--corrections", help="corrections CSV, or 'bundled' for the shipped table")
    g.add_argument("--spec", help="regression spec JSON")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--out-dir", help="directory for relative output paths")
    g.add_argument("--format", choices=("csv", "json", "text"), help="main artifact format")
    g.add_argument("--out", help="main artifact path")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_parser()
    parser = argparse.ArgumentParser(
        prog="policypanel",
        description="Policy panel regressions, diagnostics, placebo tests and SIR validation.",
        epilog=f"Any global option can be set through {ENV_PREFIX}<NAME>, e.g. {ENV_PREFIX}OUT_DIR.",
    )
    parser.add_argument("--version", action="version", version=f"policypanel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[common], help="fit a spec and write the coefficient table")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("influence", parents=[common], help="leave-one-out influence per observation")
    p.add_argument("--coef", action="append", help="target coefficient (repeatable; default: policy terms)")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("placebo", parents=[common], help="permutation placebo replicates")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--coef", action="append", help="coefficient to record (repeatable)")
    p.add_argument("--permute", nargs="+", default=[EMPLOYEES_ONLY, PUBLIC],
                   help="raw columns reassigned together")
    p.set_defaults(func=cmd_placebo)

    p = sub.add_parser("simulate", parents=[common], help="generate an SIR cohort")
    p.add_argument("--config", help="SIR config JSON (optional 'sir' and 'cohort' sections)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", parents=[common], help="regression recovery on SIR cohorts")
    p.add_argument("--config", help="SIR config JSON (optional 'sir' and 'cohort' sections)")
    p.add_argument("--lag", type=int, default=11)
    p.add_argument("--cohorts", type=int, default=1)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("counterfactual", parents=[common], help="dynamic policy counterfactual")
    p.add_argument("--remove", required=True, help="policy column to change")
    p.add_argument("--value", type=float, default=0.0, help="replacement value")
    p.add_argument("--from", dest="from_date", type=_date, help="first changed date (default: first date)")
    p.add_argument("--states", nargs="+", help="states to change (default: all)")
    p.add_argument("--report-states", nargs="+", help="states summed in the output (default: changed)")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.90)
    p.add_argument("--national-feedback", choices=("auto", "on", "off"), default="auto")
    p.set_defaults(func=cmd_counterfactual)
    return parser


def _apply_env(args: argparse.Namespace, environ: dict[str, str]) -> None:
    for name in GLOBAL_FLAGS:
        if getattr(args, name, None) is None:
            value = environ.get(ENV_PREFIX + name.upper())
            if value is not None:
                setattr(args, name, int(value) if name == "seed" else value)
    if args.format is not None and args.format not in ("csv", "json", "text"):
        raise UsageError(f"invalid format {args.format!r}")


def _fail(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    if getattr(exc, "column", None):
        doc["column"] = exc.column
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None, environ: dict[str, str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    func: Callable[[argparse.Namespace], Run] = args.func
    try:
        _apply_env(args, dict(os.environ if environ is None else environ))
        run = func(args)
        run.finish()
    except PolicyPanelError as exc:
        return _fail(exc, exc.exit_code)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail(exc, EXIT_IO)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(exc, EXIT_UNEXPECTED)
    logger.info("wrote %s", ", ".join(run.outputs))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
