"""Command-line interface: estimate from CSV, simulate designs, diagnose fits.

This is the only module that performs I/O.  Exit codes: 0 success, 2 on
parse or validation problems, 3 on solver nonconvergence, 4 when a
simulation summary is flagged invalid by its failure rate.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from .design import (
    BalanceSpec,
    CovariateFunction,
    ObservedSample,
    design_matrix,
    parse_function_spec,
)
from .errors import (
    DataError,
    DimensionError,
    EvaluationError,
    NonconvergenceError,
    SingularDesignError,
    SpecParseError,
)
from .estimators import (
    aipw,
    att_from_propensity,
    fit_att,
    fit_cbps_ate,
    fit_ocbps_ate,
    fit_ocbps_sieve,
    fit_outcomes,
    iptw,
)
from .gmm import GmmOptions, cbps_system, score_system
from .inference import (
    att_variance_from_pi,
    build_report,
    var_att,
    var_cbps,
    var_glm,
    var_ocbps,
    var_true,
    var_vopt_plugin,
)
from .propensity import clip_propensity, fit_mle

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3
EXIT_INVALID_SUMMARY = 4

_USAGE_ERRORS = (
    SpecParseError,
    DataError,
    DimensionError,
    SingularDesignError,
    EvaluationError,
)


def _parse_fn_list(text: str):
    return parse_function_spec(text)


def load_csv_dataset(path: str, pi_column: str | None = None):
    """Read a dataset CSV: columns t, y, optional pi column, covariates.

    Covariates are the remaining columns in file order, mapped
    positionally to x1..xd.  Returns (sample, pi_values_or_None,
    covariate_names).
    """
    try:
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            rows = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read dataset {path!r}: {exc}") from None
    if len(rows) < 2:
        raise DataError("dataset needs a header row and at least one data row")
    header = [name.strip() for name in rows[0]]
    if "t" not in header:
        raise DataError("dataset is missing required column 't'")
    if "y" not in header:
        raise DataError("dataset is missing required column 'y'")
    special = {"t", "y"}
    if pi_column is not None:
        if pi_column not in header:
            raise DataError(f"dataset has no column {pi_column!r} for --pi-column")
        special.add(pi_column)
    cov_names = [name for name in header if name not in special]
    if not cov_names:
        raise DataError("dataset has no covariate columns")
    width = len(header)
    values = np.empty((len(rows) - 1, width))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DataError(f"row {i} has {len(row)} fields, expected {width}")
        for k, cell in enumerate(row):
            try:
                values[i - 2, k] = float(cell)
            except ValueError:
                raise DataError(
                    f"row {i}, column {header[k]!r}: not a number: {cell!r}"
                ) from None
    col = {name: k for k, name in enumerate(header)}
    t_raw = values[:, col["t"]]
    if not np.all(np.isin(t_raw, (0.0, 1.0))):
        raise DataError("column 't' must contain only 0 and 1")
    X = values[:, [col[name] for name in cov_names]]
    sample = ObservedSample(X, t_raw.astype(np.int64), values[:, col["y"]])
    pi_values = None
    if pi_column is not None:
        pi_values = values[:, col[pi_column]]
    return sample, pi_values, cov_names


def _default_fns(d: int):
    return (CovariateFunction.constant_one(),) + tuple(
        CovariateFunction.coordinate(j) for j in range(1, d + 1)
    )


def _outcome_spec(args, d: int) -> BalanceSpec:
    h1 = _parse_fn_list(args.h1) if args.h1 else _default_fns(d)
    h2 = _parse_fn_list(args.h2) if args.h2 else _default_fns(d)
    return BalanceSpec(h1, h2)


def _require(args, flag: str, method: str):
    if getattr(args, flag.lstrip("-").replace("-", "_")) is None:
        raise SpecParseError(f"missing required flag {flag} for method={method}")


def _gmm_options(args, m: int, q: int) -> GmmOptions:
    weighting = args.weighting
    if weighting is None:
        weighting = "identity" if m == q else "two-step"
    return GmmOptions(weighting=weighting)


def _fit_for_method(args, sample, pi_values, d):
    """Run the requested fit; returns (report pieces, fitted pi, fit or None)."""
    method = args.method
    n = sample.n
    if args.estimand == "att":
        if method == "true":
            _require(args, "--pi-column", method)
            ofits_spec = _outcome_spec(args, d)
            ofits = fit_outcomes(sample, ofits_spec)
            point, _, _ = att_from_propensity(sample, pi_values)
            variance = att_variance_from_pi(sample, pi_values, ofits, ofits_spec)
            return ("att", method, point, variance, None, None,
                    clip_propensity(np.asarray(pi_values, float))[1], pi_values,
                    None)
        if method == "glm":
            model = fit_mle(sample, _default_fns(d))
            pi = model.pi_values(sample.covariates)
            ofits_spec = _outcome_spec(args, d)
            ofits = fit_outcomes(sample, ofits_spec)
            point, _, _ = att_from_propensity(sample, pi)
            variance = att_variance_from_pi(sample, pi, ofits, ofits_spec)
            return ("att", method, point, variance, None, None,
                    clip_propensity(pi)[1], pi, None)
        if method == "cbps":
            f_fns = _parse_fn_list(args.f) if args.f else _default_fns(d)
            options = _gmm_options(args, len(f_fns), len(f_fns))
            fit, point, _, _ = fit_att(sample, f_fns, options=options)
            ofits_spec = _outcome_spec(args, d)
            ofits = fit_outcomes(sample, ofits_spec)
            variance = var_att(sample, fit, ofits, ofits_spec)
            pi = fit.system.model.with_beta(fit.beta_hat).pi_values(
                sample.covariates
            )
            return ("att", method, point, variance,
                    float(np.max(np.abs(fit.residual))), fit.iterations,
                    fit.clip_events, pi, fit)
        raise SpecParseError(
            f"estimand att supports methods true, glm, cbps; got {method!r}"
        )

    if method == "true":
        _require(args, "--pi-column", method)
        point = iptw(sample, pi_values)
        variance = var_true(sample, pi_values)
        return ("ate", method, point, variance, None, None,
                clip_propensity(np.asarray(pi_values, float))[1], pi_values,
                None)
    if method == "glm":
        model = fit_mle(sample, _default_fns(d))
        pi = model.pi_values(sample.covariates)
        point = iptw(sample, pi)
        ofits_spec = _outcome_spec(args, d)
        ofits = fit_outcomes(sample, ofits_spec)
        variance = var_glm(sample, model, ofits, ofits_spec)
        return ("ate", method, point, variance, None, None,
                clip_propensity(pi)[1], pi, None)
    if method == "aipw":
        model = fit_mle(sample, _default_fns(d))
        pi = model.pi_values(sample.covariates)
        ofits_spec = _outcome_spec(args, d)
        ofits = fit_outcomes(sample, ofits_spec)
        point = aipw(sample, pi, ofits, ofits_spec)
        variance = var_vopt_plugin(sample, pi, ofits, ofits_spec)
        return ("ate", method, point, variance, None, None,
                clip_propensity(pi)[1], pi, None)
    if method == "cbps":
        f_fns = _parse_fn_list(args.f) if args.f else _default_fns(d)
        options = _gmm_options(args, len(f_fns), len(f_fns))
        fit, point = fit_cbps_ate(sample, f_fns, options=options)
        ofits_spec = _outcome_spec(args, d)
        ofits = fit_outcomes(sample, ofits_spec)
        variance = var_cbps(sample, fit, ofits, ofits_spec)
        pi = fit.system.model.with_beta(fit.beta_hat).pi_values(
            sample.covariates
        )
        return ("ate", method, point, variance,
                float(np.max(np.abs(fit.residual))), fit.iterations,
                fit.clip_events, pi, fit)
    if method == "ocbps":
        _require(args, "--h1", method)
        _require(args, "--h2", method)
        spec = BalanceSpec(_parse_fn_list(args.h1), _parse_fn_list(args.h2))
        options = _gmm_options(args, spec.m, len(spec.functions))
        fit, point = fit_ocbps_ate(sample, spec, options=options)
        ofits = fit_outcomes(sample, spec)
        variance = var_ocbps(sample, fit, ofits, spec)
        pi = fit.system.model.with_beta(fit.beta_hat).pi_values(
            sample.covariates
        )
        return ("ate", method, point, variance,
                float(np.max(np.abs(fit.residual))), fit.iterations,
                fit.clip_events, pi, fit)
    if method == "ocbps-sieve":
        _require(args, "--h1", method)
        _require(args, "--h2", method)
        spec = BalanceSpec(_parse_fn_list(args.h1), _parse_fn_list(args.h2))
        fit, point = fit_ocbps_sieve(sample, spec)
        pi = fit.system.model.with_beta(fit.beta_hat).pi_values(
            sample.covariates
        )
        ofits = fit_outcomes(sample, spec)
        variance = var_vopt_plugin(sample, pi, ofits, spec)
        return ("ate", method, point, variance,
                float(np.max(np.abs(fit.residual))), fit.iterations,
                fit.clip_events, pi, fit)
    raise SpecParseError(f"unknown method {method!r}")


def _fmt_float(value) -> str:
    return repr(float(value))


def _print_report(report, out_format: str) -> None:
    if out_format == "json":
        print(report.to_json())
        return
    d = report.to_dict()
    if out_format == "csv":
        keys = list(d)
        print(",".join(keys))
        print(
            ",".join(
                "" if d[k] is None
                else (d[k] if isinstance(d[k], str) else _fmt_float(d[k]))
                for k in keys
            )
        )
        return
    print(f"estimand: {report.estimand}")
    print(f"method: {report.method}")
    print(f"point: {_fmt_float(report.point)}")
    print(f"std_error: {_fmt_float(report.std_error)}")
    pct = f"{report.level * 100:g}"
    print(
        f"ci_{pct}: [{_fmt_float(report.ci_low)}, {_fmt_float(report.ci_high)}]"
    )
    print(f"variance: {_fmt_float(report.variance)}")
    if report.residual_max is not None:
        print(f"balance_residual_max: {_fmt_float(report.residual_max)}")
    if report.iterations is not None:
        print(f"iterations: {report.iterations}")
    if report.clip_events is not None:
        print(f"clip_events: {report.clip_events}")


def cmd_estimate(args) -> int:
    sample, pi_values, _ = load_csv_dataset(args.data, args.pi_column)
    (estimand, method, point, variance, residual_max, iterations, clips,
     _, _) = _fit_for_method(args, sample, pi_values, sample.d)
    report = build_report(
        estimand, method, point, variance, sample.n, args.level,
        residual_max=residual_max, iterations=iterations,
        clip_events=int(clips) if clips is not None else None,
    )
    _print_report(report, args.out)
    return EXIT_OK


def _weighted_means(sample, p):
    """Inverse-weighted covariate means of each arm (ratio-normalized)."""
    T = sample.treatment.astype(float)
    X = sample.covariates
    w1 = T / p
    w0 = (1.0 - T) / (1.0 - p)
    treated = (w1[:, None] * X).sum(axis=0) / w1.sum()
    control = (w0[:, None] * X).sum(axis=0) / w0.sum()
    return treated, control


def _first_moment_residuals(sample, p, d):
    """Raw inverse-weighted balance residuals of (1, x1..xd)."""
    F = design_matrix(_default_fns(d), sample.covariates)
    T = sample.treatment.astype(float)
    w = T / p - (1.0 - T) / (1.0 - p)
    return (w[:, None] * F).mean(axis=0)


def cmd_diagnose(args) -> int:
    sample, pi_values, cov_names = load_csv_dataset(args.data, args.pi_column)
    d = sample.d
    (estimand, method, _, _, _, _, clips, pi, fit) = _fit_for_method(
        args, sample, pi_values, d
    )
    pi = np.asarray(pi, dtype=float)
    p, _ = clip_propensity(pi)
    print(f"method: {method} (estimand {estimand})")
    if fit is not None:
        labels = []
        system = fit.system
        labels += [f"block1:{fn.render()}" for fn in system.block1]
        labels += [f"block2:{fn.render()}" for fn in system.block2]
        print("moment_residuals:")
        for label, value in zip(labels, fit.residual):
            print(f"  {label}: {_fmt_float(value)}")
    if method == "glm":
        model = fit_mle(sample, _default_fns(d))
        score = score_system(sample, model)
        g, _ = score.moments_and_clips(model.beta)
        print("score_residuals:")
        for fn, value in zip(_default_fns(d), g):
            print(f"  score:{fn.render()}: {_fmt_float(value)}")
    raw = _first_moment_residuals(sample, p, d)
    print("first_moment_residuals:")
    for fn, value in zip(_default_fns(d), raw):
        print(f"  {fn.render()}: {_fmt_float(value)}")
    treated, control = _weighted_means(sample, p)
    print("weighted_means (treated vs control):")
    for k, name in enumerate(cov_names):
        print(
            f"  x{k + 1} ({name}): {_fmt_float(treated[k])} vs "
            f"{_fmt_float(control[k])}"
        )
    qs = np.percentile(pi, [0, 5, 25, 50, 75, 95, 100])
    print(
        "pi_quantiles (min/5/25/50/75/95/max): "
        + " ".join(_fmt_float(v) for v in qs)
    )
    print(f"clip_events: {int(clips)}")
    return EXIT_OK


_SCENARIO_ALIASES = {"ps-local": "ps-local-misspec"}


def cmd_simulate(args) -> int:
    from . import simulation as sim

    name = args.scenario
    if name.endswith(".json"):
        try:
            with open(name) as handle:
                config = json.load(handle)
        except OSError as exc:
            raise DataError(f"cannot read scenario config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise SpecParseError(f"bad scenario config JSON: {exc}") from None
        dgp = sim.dgp_from_config(config)
        if args.n is not None:
            dgp = replace(dgp, n=args.n)
        if args.beta1 is not None:
            dgp = replace(dgp, beta1=args.beta1)
    else:
        name = _SCENARIO_ALIASES.get(name, name)
        dgp = sim.DgpSpec(
            scenario=name,
            n=args.n if args.n is not None else 1000,
            beta1=args.beta1 if args.beta1 is not None else 0.0,
        )
    estimators = tuple(
        tok.strip() for tok in args.estimators.split(",") if tok.strip()
    )
    if not estimators:
        raise SpecParseError("empty estimator list")
    summary = sim.run_monte_carlo(
        dgp,
        estimators=estimators,
        reps=args.reps,
        base_seed=args.seed,
        workers=args.workers,
    )
    if args.out is not None:
        sim.write_summary_csv(summary, args.out)
    print(sim.format_summary_table(summary))
    if summary.invalid:
        return EXIT_INVALID_SUMMARY
    return EXIT_OK


def _add_fit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="dataset CSV path")
    parser.add_argument(
        "--method",
        required=True,
        choices=["true", "glm", "cbps", "ocbps", "ocbps-sieve", "aipw"],
    )
    parser.add_argument("--estimand", choices=["ate", "att"], default="ate")
    parser.add_argument("--h1", help="comma-separated covariate functions")
    parser.add_argument("--h2", help="comma-separated covariate functions")
    parser.add_argument("--f", help="comma-separated balance functions")
    parser.add_argument("--pi-column", help="column of known propensities")
    parser.add_argument("--level", type=float, default=0.95)
    parser.add_argument("--weighting", choices=["identity", "two-step"])
    parser.add_argument("--out", choices=["text", "json", "csv"], default="text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocbps",
        description=(
            "Covariate-balancing propensity score weighting for treatment "
            "effect estimation"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="estimate an effect from CSV data")
    _add_fit_flags(p_est)
    p_est.set_defaults(func=cmd_estimate)

    p_sim = sub.add_parser("simulate", help="run a simulation scenario")
    p_sim.add_argument(
        "--scenario", required=True,
        help="scenario name or a .json config path",
    )
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--beta1", type=float)
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--seed", type=int, default=1)
    p_sim.add_argument(
        "--estimators", default="true,glm,cbps,ocbps",
        help="comma-separated estimator names",
    )
    p_sim.add_argument("--out", help="write the summary CSV here")
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_diag = sub.add_parser("diagnose", help="balance diagnostics for a fit")
    _add_fit_flags(p_diag)
    p_diag.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonconvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        if exc.grad_norm is not None:
            print(f"  residual max-norm: {exc.grad_norm!r}", file=sys.stderr)
        if exc.iterations is not None:
            print(f"  iterations: {exc.iterations}", file=sys.stderr)
        if exc.best_beta is not None:
            best = " ".join(repr(float(b)) for b in exc.best_beta)
            print(f"  best coefficients: {best}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
