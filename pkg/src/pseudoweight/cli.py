"""Command-line entry point.

Subcommands:

* ``simulate`` — run the Monte Carlo study and write the metrics table;
* ``weight``   — build pseudo-weight files for cohort/survey CSVs;
* ``estimate`` — pseudo-weighted mean with TL/JK variances and CI;
* ``diagnose`` — matching-score exchangeability diagnostic (q vs q-tilde).

Every run writes a ``manifest.json`` (config hash, seed, versions) into the
output directory so outputs can be reproduced exactly.  Exit codes: 2 for
input/validation errors, 3 for a non-converged fit unless
``--allow-nonconverged`` is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, kernels
from .data_model import (DataError, METHODS, load_cohort_csv, load_survey_csv, validate_inputs)
from .estimation import estimate_mean, hajek_mean, sea_diagnostic
from .propensity import FitConfig, fit_pseudo_mle
from .pseudo_weights import KernelSpec, compute_pseudoweights
from .simulation import ScenarioConfig, run_replications, scenario_preset

log = logging.getLogger("pseudoweight")

EXIT_VALIDATION = 2
EXIT_NONCONVERGED = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("PSEUDOWEIGHT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_manifest(out_dir: Path, config: dict):
    payload = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "config": config,
        "config_sha256": hashlib.sha256(payload.encode()).hexdigest(),
        "versions": {
            "pseudoweight": __version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "backend": kernels.active_backend(),
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _parse_methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    if not methods:
        raise CliError(f"no methods given; valid methods: {', '.join(METHODS)}")
    return methods


def _parse_cols(text):
    if not text:
        return None, ()
    plain, cat = [], []
    for c in text.split(","):
        c = c.strip()
        if c.startswith("cat:"):
            cat.append(c[4:])
            plain.append(c[4:])
        elif c:
            plain.append(c)
    return plain, tuple(cat)


def _kernel_spec(args) -> KernelSpec:
    bandwidth = "silverman" if args.bandwidth is None else float(args.bandwidth)
    return KernelSpec(kind=args.kernel or "triangular", bandwidth=bandwidth)


def _load_pair(args):
    cols, cat = _parse_cols(args.model_cols)
    try:
        cohort = load_cohort_csv(args.cohort, covariate_cols=cols, categorical_cols=cat)
        survey = load_survey_csv(args.survey, covariate_cols=cols, categorical_cols=cat)
    except (DataError, FileNotFoundError, KeyError) as exc:
        raise CliError(str(exc)) from exc
    check = validate_inputs(cohort, survey)
    if not check.ok:
        raise CliError("; ".join(check.violations))
    return cohort, survey


def cmd_weight(args) -> int:
    methods = _parse_methods(args.methods)
    cohort, survey = _load_pair(args)
    kernel = _kernel_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    meta = {}
    for method in methods:
        fit, ws = compute_pseudoweights(method, cohort, survey, kernel=kernel)
        if not fit.converged and not args.allow_nonconverged:
            raise CliError(f"propensity fit for {method} did not converge "
                           "(rerun with --allow-nonconverged to keep it)", EXIT_NONCONVERGED)
        tag = method.replace(".", "_").lower()
        pd.DataFrame({"id": cohort.ids, "method": method, "weight": ws.w}).to_csv(
            out / f"weights_{tag}.csv", index=False)
        meta[method] = {
            "sum_weights": float(ws.w.sum()),
            "kernel": ws.kernel,
            "bandwidth": ws.bandwidth,
            "scale_a": fit.scale_a,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "n_fallback": ws.n_fallback,
            "warnings": list(fit.warnings),
        }
    (out / "weights_meta.json").write_text(json.dumps(meta, indent=2))
    _write_manifest(out, {"subcommand": "weight", "cohort": args.cohort,
                          "survey": args.survey, "methods": methods,
                          "model_cols": args.model_cols, "kernel": kernel.kind,
                          "bandwidth": kernel.bandwidth})
    print(f"wrote {len(methods)} weight file(s) to {out}")
    return 0


def cmd_estimate(args) -> int:
    methods = _parse_methods(args.methods)
    cohort, survey = _load_pair(args)
    if cohort.y is None:
        raise CliError("cohort CSV needs an '__outcome' column for estimation")
    kernel = _kernel_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    for method in methods:
        report = estimate_mean(method, cohort, survey, kernel=kernel,
                               jk_groups=args.groups, seed=args.seed)
        if any("no convergence" in w for w in report.warnings) and not args.allow_nonconverged:
            raise CliError(f"propensity fit for {method} did not converge",
                           EXIT_NONCONVERGED)
        reports.append(report.to_dict())
        print(f"{method}: mu={report.mu_hat:.6g} var_tl={report.var_tl:.6g} "
              f"ci=({report.ci_lo:.6g}, {report.ci_hi:.6g})")
    (out / "estimates.json").write_text(json.dumps(reports, indent=2))
    _write_manifest(out, {"subcommand": "estimate", "cohort": args.cohort,
                          "survey": args.survey, "methods": methods,
                          "model_cols": args.model_cols, "groups": args.groups,
                          "seed": args.seed})
    return 0


def cmd_diagnose(args) -> int:
    cohort, survey = _load_pair(args)
    fit_w = fit_pseudo_mle(cohort, survey, FitConfig(survey_weight_mode="weighted"))
    fit_u = fit_pseudo_mle(cohort, survey, FitConfig(survey_weight_mode="unweighted"))
    diag = sea_diagnostic(fit_w.q_cohort, fit_u.q_cohort, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"q": diag.q, "q_tilde": diag.q_tilde}).to_csv(
        out / "sea_scores.csv", index=False)
    summary = {"r2_func": diag.r2_func, "threshold": diag.threshold,
               "sea_compatible": diag.compatible, "degenerate": diag.degenerate}
    (out / "sea_summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(out, {"subcommand": "diagnose", "cohort": args.cohort,
                          "survey": args.survey, "model_cols": args.model_cols,
                          "threshold": args.threshold})
    verdict = "compatible" if diag.compatible else "VIOLATION flagged"
    print(f"R2_func = {diag.r2_func:.4f} -> {verdict}")
    return 0


def cmd_simulate(args) -> int:
    try:
        if args.config:
            cfg = ScenarioConfig.from_json(Path(args.config).read_text())
        else:
            cfg = scenario_preset(args.preset)
        overrides = {}
        for name in ("N", "n_c", "n_s", "B", "model", "seed", "jk_groups"):
            val = getattr(args, name)
            if val is not None:
                overrides[name] = val
        if args.kernel or args.bandwidth is not None:
            overrides["kernel"] = _kernel_spec(args)
        if overrides:
            from dataclasses import replace
            cfg = replace(cfg, **overrides)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        raise CliError(str(exc)) from exc

    result = run_replications(cfg, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    df = result.to_dataframe()
    df.to_csv(out / "metrics.csv", index=False)
    (out / "metrics.json").write_text(result.to_json())
    (out / "scenario.json").write_text(cfg.to_json())
    _write_manifest(out, json.loads(cfg.to_json()))
    print(f"mu_true = {result.mu_true:.4f}  (B = {cfg.B}, failed = {result.n_failed})")
    print(df.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudoweight",
                                     description="Pseudo-weighting of nonprobability cohorts")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_io(p, need_outcome=False):
        p.add_argument("--cohort", required=True, help="cohort CSV")
        p.add_argument("--survey", required=True, help="survey CSV (needs __weight)")
        p.add_argument("--model-cols", default=None,
                       help="comma list of covariate columns; prefix cat: for categorical")
        p.add_argument("--out", required=True, help="output directory")

    def add_kernel(p):
        p.add_argument("--kernel", default="triangular",
                       choices=["epanechnikov", "triangular", "gaussian"])
        p.add_argument("--bandwidth", type=float, default=None,
                       help="fixed bandwidth (default: Silverman rule)")

    pw = sub.add_parser("weight", help="build pseudo-weight files")
    add_io(pw)
    add_kernel(pw)
    pw.add_argument("--methods", default=",".join(METHODS))
    pw.add_argument("--allow-nonconverged", action="store_true")
    pw.set_defaults(func=cmd_weight)

    pe = sub.add_parser("estimate", help="pseudo-weighted mean with variances")
    add_io(pe)
    add_kernel(pe)
    pe.add_argument("--methods", default=",".join(METHODS))
    pe.add_argument("--groups", type=int, default=None, help="jackknife group count")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--allow-nonconverged", action="store_true")
    pe.set_defaults(func=cmd_estimate)

    pd_ = sub.add_parser("diagnose", help="matching-score exchangeability diagnostic")
    add_io(pd_)
    pd_.add_argument("--threshold", type=float, default=0.95)
    pd_.set_defaults(func=cmd_diagnose)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study")
    ps.add_argument("--preset", default="scenario1", choices=["scenario1", "scenario2"])
    ps.add_argument("--config", default=None, help="scenario config JSON (overrides preset)")
    ps.add_argument("--N", type=int, default=None)
    ps.add_argument("--n-c", dest="n_c", type=int, default=None)
    ps.add_argument("--n-s", dest="n_s", type=int, default=None)
    ps.add_argument("--B", type=int, default=None)
    ps.add_argument("--model", default=None, choices=["T", "U", "M1", "M2"])
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--groups", dest="jk_groups", type=int, default=None)
    ps.add_argument("--kernel", default=None,
                    choices=["epanechnikov", "triangular", "gaussian"])
    ps.add_argument("--bandwidth", type=float, default=None)
    ps.add_argument("--threads", type=int, default=0, help="0 = all cores")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
