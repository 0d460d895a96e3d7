"""Command-line interface.

Subcommands::

    ifeboot fit            two-step estimate, optionally bias corrected
    ifeboot bootstrap      parametric bootstrap: corrections and intervals
    ifeboot ape            average partial effect with bootstrap interval
    ifeboot simulate       Monte Carlo run of one design
    ifeboot select-factors eigenvalue-ratio choice of the number of factors

Every flag can also be set in a flat ``key = value`` config file passed with
``--config`` (keys are flag names, dashes or underscores). Flags given on the
command line win. Estimator tuning keys (the fields of
:class:`ifeboot.estimator.EstimatorOptions`) may appear in the config file
directly or on the command line as ``--set key=value``. A manifest JSON
written by an earlier run is accepted as a config file too, which reruns it.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
import time
import warnings
from importlib import resources

import numpy as np

from . import __version__
from .errors import IfebootError

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
TOY = "@toy"

# flags that never change results; left out of the config hash
_VOLATILE = {"out", "manifest", "jobs", "config", "quiet"}


class UsageError(Exception):
    pass


# -- config ----------------------------------------------------------------------------


def read_config(path: str) -> dict:
    """Parse a flat ``key = value`` file, or the ``config`` block of a manifest."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        cfg = doc.get("config", doc)
        return {str(k).replace("-", "_"): v for k, v in cfg.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(cfg: dict) -> str:
    """Inverse of :func:`read_config` for flat files."""
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        if v is None:
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(str(s) for s in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _estimator_fields() -> dict:
    from .estimator import EstimatorOptions

    return {f.name: f for f in dataclasses.fields(EstimatorOptions)}


def _coerce_option(name: str, value):
    f = _estimator_fields()[name]
    default = f.default
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"option {name} expects a boolean, got {value!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            try:
                return int(value)
            except ValueError:
                raise UsageError(f"option {name} expects an integer, got {value!r}") from None
        if isinstance(default, float):
            try:
                return float(value)
            except ValueError:
                raise UsageError(f"option {name} expects a number, got {value!r}") from None
    return value


def _estimator_options(settings: dict):
    from .estimator import EstimatorOptions

    kwargs = {k: _coerce_option(k, v) for k, v in settings.items()}
    try:
        opts = EstimatorOptions(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid estimator option: {exc}") from None
    for k, v in dataclasses.asdict(opts).items():
        if isinstance(v, (int, float)) and not isinstance(v, bool) and (not math.isfinite(v) or v < 0):
            raise UsageError(f"estimator option {k} must be finite and non-negative")
    return opts


# -- parser ------------------------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _level(s):
    v = float(s)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {s}")
    return v


def _d_f(s):
    if str(s).lower() == "auto":
        return "auto"
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("d_f must be non-negative or 'auto'")
    return v


def _bool(s):
    if isinstance(s, bool):
        return s
    low = str(s).lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s}")


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file (or a manifest to rerun)")
    p.add_argument("--out", help="output file; stdout when omitted")
    p.add_argument("--manifest", help="manifest path (default: OUT.manifest.json, or stderr without --out)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="estimator option")
    p.add_argument("--quiet", type=_bool, nargs="?", const=True, default=False)


def _add_data(p):
    p.add_argument("--data", help=f"long-format CSV, or {TOY} for the bundled 6x6 example")
    p.add_argument("--unit", default="unit", help="unit id column")
    p.add_argument("--period", default="period", help="period id column")
    p.add_argument("--y", default="y", help="outcome column")
    p.add_argument("--x", default="x1", help="comma-separated covariate columns")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--standardize", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--family", default="logit", choices=["logit", "probit"])
    p.add_argument("--d-f", dest="d_f", type=_d_f, default=1, help="number of factors or 'auto'")
    p.add_argument("--r-max", dest="r_max", type=_positive_int, default=None, help="upper bound for d_f=auto")


def _add_boot(p, default_b=399):
    p.add_argument("--bootstrap", "--B", dest="B", type=_positive_int, default=default_b, help="bootstrap replicates")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--cold-start", dest="cold_start", type=_bool, nargs="?", const=True, default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifeboot", description="Binary-choice panels with interactive fixed effects.")
    parser.add_argument("--version", action="version", version=f"ifeboot {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("fit", help="two-step estimate")
    _add_common(p)
    _add_data(p)
    p.add_argument("--correct", default="none", choices=["none", "analytical", "jackknife"])

    p = sub.add_parser("bootstrap", help="bootstrap corrections and intervals")
    _add_common(p)
    _add_data(p)
    _add_boot(p)
    p.add_argument("--ci-level", "--level", dest="level", type=_level, default=0.95)
    p.add_argument("--transform", default="auto", choices=["identity", "log", "boxcox", "yeojohnson", "auto"])

    p = sub.add_parser("ape", help="average partial effect")
    _add_common(p)
    _add_data(p)
    _add_boot(p)
    p.add_argument("--covariate", type=int, default=0)
    p.add_argument("--kind", default="marginal", choices=["marginal", "shift"])
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--level", "--ci-level", dest="level", type=_level, default=0.95)

    p = sub.add_parser("simulate", help="Monte Carlo run")
    _add_common(p)
    p.add_argument("--scenario", default="s1", choices=["s1", "s2", "s3", "s4"])
    p.add_argument("--family", default="logit", choices=["logit", "probit"])
    p.add_argument("--N", type=_positive_int, default=30)
    p.add_argument("--T", type=_positive_int, default=20)
    p.add_argument("--d-f", dest="d_f", type=_positive_int, default=2)
    p.add_argument("--beta0", type=float, default=0.5)
    p.add_argument("--h0", dest="h0_value", type=float, default=0.7)
    p.add_argument("--reps", type=_positive_int, default=200)
    p.add_argument("--B", "--bootstrap", dest="B", type=_positive_int, default=199)
    p.add_argument("--level", type=_level, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--methods", default="mle,splitpj,analytical,boot_mean,boot_median")
    p.add_argument("--ci-methods", dest="ci_methods", default="boot,log,boxcox,yeojohnson")
    p.add_argument("--ape", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--format", default="json", choices=["json", "csv", "text"])

    p = sub.add_parser("select-factors", help="choose the number of factors")
    _add_common(p)
    _add_data(p)
    return parser


def _parse(argv):
    """Two passes: find --config, install its values as defaults, parse again."""
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = {}
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest: a for a in sub._actions}
        est = _estimator_fields()
        defaults = {}
        for k, v in cfg.items():
            if k in ("command", "config", "set"):
                continue
            if k in est:
                settings[k] = v
            elif k in dests:
                a = dests[k]
                if a.type is not None and isinstance(v, str):
                    try:
                        v = a.type(v)
                    except (argparse.ArgumentTypeError, ValueError) as exc:
                        raise UsageError(f"config key {k}: {exc}") from None
                if a.choices is not None and v not in a.choices:
                    raise UsageError(f"config key {k}: {v!r} not in {sorted(a.choices)}")
                defaults[k] = v
            else:
                raise UsageError(f"unknown config key {k!r}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        k = k.replace("-", "_")
        if k not in _estimator_fields():
            raise UsageError(f"unknown estimator option {k!r}")
        settings[k] = v
    return args, settings


# -- output ----------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def dumps(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path: str, text: str) -> None:
    """Write via a temporary file in the target directory and rename it into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# -- commands --------------------------------------------------------------------------


def _load(args):
    from .panel import PanelSchema, load_csv, standardize

    schema = PanelSchema(args.unit, args.period, args.y, tuple(s.strip() for s in args.x.split(",") if s.strip()), args.delimiter)
    if args.data is None:
        raise UsageError("--data is required")
    if args.data == TOY:
        with resources.as_file(resources.files("ifeboot") / "data" / "toy.csv") as p:
            data = load_csv(p, PanelSchema())
    else:
        data = load_csv(args.data, schema)
    names = list(schema.x) if args.data != TOY else ["x1"]
    std = None
    if args.standardize:
        data, rep = standardize(data)
        std = {"means": rep.means, "sds": rep.sds}
    return data, names, std


def _resolve_d_f(args, data, opts):
    from .estimator import select_num_factors

    if args.d_f != "auto":
        return args.d_f, None
    sel = select_num_factors(data, args.family, args.r_max, opts)
    return sel.chosen, _selection_doc(sel)


def _selection_doc(sel):
    return {
        "chosen": sel.chosen,
        "singular_values": sel.singular_values,
        "ratios": sel.ratios,
        "threshold": sel.threshold,
        "floor": sel.floor,
        "below_threshold": sel.below_threshold,
        "note": sel.note,
    }


def _fit_doc(res, names, data):
    doc = {
        "family": res.family.value,
        "d_f": res.d_f,
        "covariates": names,
        "beta_hat": res.beta,
        "loglik": res.loglik,
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "iterations": res.iterations,
        "n_units": data.n_units,
        "n_periods": data.n_periods,
    }
    if res.tuning is not None:
        doc["tuning"] = {"phi_initial": res.tuning[0], "phi_final": res.tuning[1]}
    return doc


def _fit_common(args, settings):
    from .estimator import fit

    opts = _estimator_options(settings)
    data, names, std = _load(args)
    d_f, selection = _resolve_d_f(args, data, opts)
    res = fit(data, args.family, d_f, opts)
    return data, names, std, opts, res, selection


def cmd_fit(args, settings):
    from .bias import analytical_correct, split_panel_jackknife

    data, names, std, opts, res, selection = _fit_common(args, settings)
    doc = {"kind": "fit", **_fit_doc(res, names, data)}
    if std:
        doc["standardization"] = std
    if selection:
        doc["factor_selection"] = selection
    if args.correct == "analytical":
        ac = analytical_correct(data, res)
        doc["correction"] = {"method": "analytical", "beta_corrected": ac.beta_corrected, "se": ac.se, "b_hat": ac.b_hat}
    elif args.correct == "jackknife":
        jk = split_panel_jackknife(data, args.family, res.d_f, opts, full_fit=res)
        doc["correction"] = {
            "method": "jackknife",
            "beta_corrected": jk.beta_corrected,
            "beta_time_halves": list(jk.beta_time_halves),
            "beta_unit_halves": list(jk.beta_unit_halves),
            "dropped": [list(d) for d in jk.dropped],
        }
    return doc


def _interval_doc(k, ci):
    t = ci.transform
    return {
        "covariate": k,
        "method": ci.method,
        "lower": ci.lower,
        "upper": ci.upper,
        "level": ci.level,
        "transform": t.kind if t is not None else "identity",
        "lambda": t.lam if t is not None else None,
        "clamped": list(ci.clamped),
    }


def cmd_bootstrap(args, settings):
    from .bootstrap import Transform, bias_correct, quantile_ci, run_bootstrap, select_lambda, transformed_ci
    from .errors import DomainError

    data, names, std, opts, res, selection = _fit_common(args, settings)
    if not res.converged:
        raise IfebootError(f"fit did not converge ({res.stop_reason})")
    run = run_bootstrap(data, res, args.family, args.B, args.seed, args.jobs, opts, cold_start=args.cold_start)
    kinds = ["identity", "log", "boxcox", "yeojohnson"] if args.transform == "auto" else [args.transform]
    cis, skipped = [], []
    for k in range(data.n_covariates):
        for kind in kinds:
            try:
                if kind == "identity":
                    ci = quantile_ci(res.beta, run, args.level, k)
                elif kind == "log":
                    ci = transformed_ci(res.beta, run, Transform("log"), args.level, k)
                else:
                    ci = transformed_ci(res.beta, run, select_lambda(run, kind, k), args.level, k)
            except DomainError as exc:
                if args.transform != "auto":
                    raise
                skipped.append({"covariate": k, "transform": kind, "reason": str(exc)})
                continue
            cis.append(_interval_doc(k, ci))
    doc = {
        "kind": "bootstrap",
        **_fit_doc(res, names, data),
        "beta_bc_mean": bias_correct(res.beta, run, "mean"),
        "beta_bc_median": bias_correct(res.beta, run, "median"),
        "ci": cis,
        "skipped_transforms": skipped,
        "B": run.b_count,
        "B_effective": run.b_effective,
        "failures": list(run.failures),
        "seed": args.seed,
    }
    if selection:
        doc["factor_selection"] = selection
    return doc


def cmd_ape(args, settings):
    from .ape import EffectSpec, ape_bootstrap_ci
    from .bootstrap import run_bootstrap

    data, names, std, opts, res, selection = _fit_common(args, settings)
    if not res.converged:
        raise IfebootError(f"fit did not converge ({res.stop_reason})")
    try:
        spec = EffectSpec(args.covariate, args.kind, args.delta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.covariate >= data.n_covariates:
        raise UsageError(f"--covariate {args.covariate} out of range (K={data.n_covariates})")
    run = run_bootstrap(data, res, args.family, args.B, args.seed, args.jobs, opts, cold_start=args.cold_start, ape_spec=spec)
    a = ape_bootstrap_ci(data, res, args.family, spec, run, args.level)
    return {
        "kind": "ape",
        **_fit_doc(res, names, data),
        "effect": {"covariate": args.covariate, "name": names[args.covariate], "kind": args.kind, "delta": args.delta},
        "ape_hat": a.point,
        "ape_bc_mean": a.bias_corrected_mean,
        "ape_bc_median": a.bias_corrected_median,
        "ci": {"method": a.ci.method, "lower": a.ci.lower, "upper": a.ci.upper, "level": a.ci.level},
        "B": run.b_count,
        "B_effective": run.b_effective,
        "failures": list(run.failures),
        "seed": args.seed,
    }


def cmd_simulate(args, settings):
    from .simlab import CI_METHODS, METHODS, ScenarioSpec, render, run_mc

    methods = tuple(s.strip() for s in args.methods.split(",") if s.strip())
    cims = tuple(s.strip() for s in args.ci_methods.split(",") if s.strip())
    bad = [m for m in methods if m not in METHODS] + [m for m in cims if m not in CI_METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}")
    _estimator_options(settings)  # validate
    try:
        spec = ScenarioSpec(
            scenario=args.scenario, family=args.family, N=args.N, T=args.T, d_f=args.d_f,
            beta0=args.beta0, mc_reps=args.reps, B=args.B, h0_value=args.h0_value, level=args.level,
            seed=args.seed, methods=methods, ci_methods=cims, ape=args.ape,
            options={k: _coerce_option(k, v) for k, v in settings.items()},
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    progress = None
    if not args.quiet:
        def progress(done, total):
            print(f"replication {done}/{total}", file=sys.stderr, flush=True)
    report = run_mc(spec, jobs=args.jobs, progress=progress)
    report = dataclasses.replace(report, wall_time=None)
    return render(report, args.format)


def cmd_select(args, settings):
    from .estimator import select_num_factors

    opts = _estimator_options(settings)
    data, names, std = _load(args)
    sel = select_num_factors(data, args.family, args.r_max, opts)
    return {"kind": "select_factors", "family": args.family, **_selection_doc(sel)}


COMMANDS = {
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "ape": cmd_ape,
    "simulate": cmd_simulate,
    "select-factors": cmd_select,
}


def _resolved_config(args, settings) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("set",) and v is not None}
    cfg.update({k: str(v) for k, v in settings.items()})
    return _jsonable(cfg)


def _config_hash(cfg: dict) -> str:
    stable = {k: v for k, v in cfg.items() if k not in _VOLATILE}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def _error_record(exc, code):
    return {"schema_version": SCHEMA_VERSION, "status": "error", "exit_code": code, "error": {"type": type(exc).__name__, "message": str(exc)}}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args, settings = _parse(argv)
    except SystemExit as exc:  # argparse: --help, --version or a usage error
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"ifeboot: error: {exc}", file=sys.stderr)
        print(dumps(_error_record(exc, EXIT_USAGE)), file=sys.stderr, end="")
        return EXIT_USAGE

    cfg = _resolved_config(args, settings)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "command": args.command,
        "argv": argv,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "seed": cfg.get("seed"),
        "version": __version__,
        "numpy": np.__version__,
    }
    code, err = EXIT_OK, None
    try:
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            body = COMMANDS[args.command](args, settings)
        if isinstance(body, dict):
            body = dumps({"schema_version": SCHEMA_VERSION, "version": __version__, **body})
        if args.out:
            atomic_write(args.out, body)
        else:
            sys.stdout.write(body)
    except UsageError as exc:
        code, err = EXIT_USAGE, exc
    except (IfebootError, np.linalg.LinAlgError, ValueError, ArithmeticError) as exc:
        code, err = EXIT_RUNTIME, exc
    except OSError as exc:
        code, err = EXIT_IO, exc
    manifest["status"] = "ok" if code == EXIT_OK else "error"
    manifest["exit_code"] = code
    manifest["wall_time"] = time.perf_counter() - t0
    if err is not None:
        manifest["error"] = _error_record(err, code)["error"]
        print(f"ifeboot: error: {type(err).__name__}: {err}", file=sys.stderr)
        print(dumps(_error_record(err, code)), file=sys.stderr, end="")
    mpath = args.manifest or (args.out + ".manifest.json" if args.out else None)
    try:
        if mpath:
            atomic_write(mpath, dumps(manifest))
        elif not args.quiet:
            print(dumps(manifest), file=sys.stderr, end="")
    except OSError as exc:
        print(f"ifeboot: error: cannot write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
