"""Monte Carlo experiments for the binary-choice factor model.

Four designs share the outcome equation ``Y = 1{X beta0 + alpha_i' gamma_t - eps > 0}``
with logistic or normal errors and differ in how covariates and effects are
drawn:

s1  covariates built from their own independent factors
s2  covariates load on the outcome factors, ``X = 0.3 alpha' gamma + nu``
s3  as s1, with 10% of the loading vectors replaced by a vector of threes
s4  as s1, with 5% of the factor vectors multiplied by 10
"""

from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .ape import EffectSpec, ape_value
from .bias import analytical_correct, split_panel_jackknife
from .bootstrap import (
    Transform,
    bias_correct,
    quantile_ci,
    run_bootstrap,
    select_lambda,
    transformed_ci,
)
from .errors import IfebootError, TooManyFailures
from .estimator import EstimatorOptions, fit
from .likelihood import FactorParams, Family
from .panel import PanelData

__all__ = [
    "ScenarioSpec",
    "McReport",
    "MethodRow",
    "CiRow",
    "generate",
    "replicate",
    "run_mc",
    "summarize",
    "render",
    "report_from_csv",
    "report_from_json",
    "METHODS",
    "CI_METHODS",
]

SCENARIOS = ("s1", "s2", "s3", "s4")
METHODS = ("mle", "splitpj", "analytical", "boot_mean", "boot_median")
CI_METHODS = ("boot", "log", "boxcox", "yeojohnson")
METHOD_LABELS = {
    "mle": "MLE",
    "splitpj": "SplitPJ",
    "analytical": "Analytical",
    "boot_mean": "Boot-Mean",
    "boot_median": "Boot-Median",
}
CI_LABELS = {"boot": "Boot", "log": "Log", "boxcox": "Box-Cox", "yeojohnson": "Yeo-Johnson"}
_Z = {0.90: 1.6448536269514722, 0.95: 1.959963984540054, 0.99: 2.5758293035489004}


@dataclass(frozen=True)
class ScenarioSpec:
    """One Monte Carlo design.

    ``seed`` fixes everything: replication r draws its data from the stream
    ``(seed, r, 0)`` and seeds its bootstrap with ``(seed, r, 1)``.
    """

    scenario: str = "s1"
    family: str = "logit"
    N: int = 30
    T: int = 20
    d_f: int = 2
    beta0: float = 0.5
    K: int = 1
    mc_reps: int = 200
    B: int = 199
    h0_value: float = 0.7
    level: float = 0.95
    seed: int = 0
    methods: tuple = METHODS
    ci_methods: tuple = CI_METHODS
    ape: bool = False
    max_failure_share: float = 0.2
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.scenario.lower()
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        object.__setattr__(self, "scenario", s)
        object.__setattr__(self, "family", Family.parse(self.family).value)
        if self.d_f < 1:
            raise ValueError("d_f must be at least 1")
        if not (math.isfinite(self.beta0) and math.isfinite(self.h0_value)):
            raise ValueError("beta0 and h0_value must be finite")
        if self.N < 2 or self.T < 2 or self.K < 1 or self.mc_reps < 1 or self.B < 1:
            raise ValueError("N, T >= 2 and K, mc_reps, B >= 1 required")
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))
        object.__setattr__(self, "ci_methods", tuple(m for m in CI_METHODS if m in self.ci_methods))
        object.__setattr__(self, "options", dict(self.options))

    def estimator_options(self) -> EstimatorOptions:
        return EstimatorOptions(**self.options)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["ci_methods"] = list(self.ci_methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        for key in ("methods", "ci_methods"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _stream(seed: int, rep: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(rep), int(purpose)))


def generate(spec: ScenarioSpec, rep: int) -> tuple[PanelData, FactorParams]:
    """Draw one panel and the parameters that generated it."""
    rng = np.random.Generator(np.random.Philox(_stream(spec.seed, rep, 0)))
    n, t, d, k = spec.N, spec.T, spec.d_f, spec.K
    alpha = rng.standard_normal((n, d))
    gamma = rng.standard_normal((t, d))
    if spec.scenario == "s3":
        idx = rng.choice(n, size=math.ceil(0.10 * n), replace=False)
        alpha[idx] = 3.0
    elif spec.scenario == "s4":
        idx = rng.choice(t, size=math.ceil(0.05 * t), replace=False)
        gamma[idx] *= 10.0
    if spec.scenario == "s2":
        x = 0.3 * (alpha @ gamma.T)[None] + rng.standard_normal((k, n, t))
    else:
        ax = rng.standard_normal((n, d))
        gx = rng.standard_normal((t, d))
        x = (ax @ gx.T)[None] + rng.standard_normal((k, n, t))
    beta = np.full(k, float(spec.beta0))
    if spec.family == "logit":
        eps = rng.logistic(size=(n, t))
    else:
        eps = rng.standard_normal((n, t))
    z = np.tensordot(beta, x, axes=(0, 0)) + alpha @ gamma.T
    y = (z - eps > 0).astype(float)
    return PanelData(y, x), FactorParams(beta, alpha, gamma)


def _boot_seed(spec: ScenarioSpec, rep: int) -> int:
    return int(_stream(spec.seed, rep, 1).generate_state(1, np.uint64)[0])


def _zcrit(level: float) -> float:
    if level in _Z:
        return _Z[level]
    from scipy.stats import norm

    return float(norm.ppf(0.5 + level / 2.0))


def replicate(spec: ScenarioSpec, rep: int) -> dict:
    """Run every requested method on replication `rep`; returns a plain record.

    The record holds point estimates (first covariate) and interval
    endpoints per method, with ``None`` where a method failed, plus the error
    text when the main fit itself failed.
    """
    family = Family.parse(spec.family)
    opts = spec.estimator_options()
    data, truth = generate(spec, rep)
    rec = {"rep": rep, "ok": False, "error": None, "est": {}, "ci": {}, "lambda": {}, "notes": {}}
    try:
        res = fit(data, family, spec.d_f, opts)
    except (IfebootError, np.linalg.LinAlgError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec
    if not res.converged:
        rec["error"] = f"fit not converged ({res.stop_reason})"
        return rec
    rec["ok"] = True
    b = float(res.beta[0])
    zc = _zcrit(spec.level)
    est, ci = rec["est"], rec["ci"]

    se = None
    if "analytical" in spec.methods or "mle" in spec.methods or "splitpj" in spec.methods:
        try:
            ac = analytical_correct(data, res, family)
            se = float(ac.se[0])
            if "analytical" in spec.methods:
                est["analytical"] = float(ac.beta_corrected[0])
        except (IfebootError, np.linalg.LinAlgError) as exc:
            rec["notes"]["analytical"] = f"{type(exc).__name__}: {exc}"
    if "mle" in spec.methods:
        est["mle"] = b
    if "splitpj" in spec.methods:
        try:
            est["splitpj"] = float(split_panel_jackknife(data, family, spec.d_f, opts, full_fit=res).beta_corrected[0])
        except (IfebootError, np.linalg.LinAlgError) as exc:
            rec["notes"]["splitpj"] = f"{type(exc).__name__}: {exc}"
    for m in ("mle", "splitpj", "analytical"):
        if m in est:
            ci[m] = [est[m] - zc * se, est[m] + zc * se] if se is not None else None

    need_boot = any(m.startswith("boot") for m in spec.methods) or spec.ci_methods or spec.ape
    if need_boot:
        ape_spec = EffectSpec(0, "marginal") if spec.ape else None
        try:
            run = run_bootstrap(data, res, family, spec.B, _boot_seed(spec, rep), 1, opts, ape_spec=ape_spec)
        except (IfebootError, np.linalg.LinAlgError) as exc:
            rec["notes"]["bootstrap"] = f"{type(exc).__name__}: {exc}"
            run = None
        if run is not None:
            rec["b_effective"] = run.b_effective
            if "boot_mean" in spec.methods:
                est["boot_mean"] = float(bias_correct(res.beta, run, "mean")[0])
            if "boot_median" in spec.methods:
                est["boot_median"] = float(bias_correct(res.beta, run, "median")[0])
            plain = None
            try:
                plain = quantile_ci(res.beta, run, spec.level)
            except IfebootError as exc:
                rec["notes"]["boot"] = f"{type(exc).__name__}: {exc}"
            for m in ("boot_mean", "boot_median"):
                if m in est:
                    ci[m] = [plain.lower, plain.upper] if plain is not None else None
            for cm in spec.ci_methods:
                try:
                    if cm == "boot":
                        iv = plain
                    elif cm == "log":
                        iv = transformed_ci(res.beta, run, Transform("log"), spec.level)
                    else:
                        t = select_lambda(run, cm)
                        rec["lambda"][cm] = t.lam
                        iv = transformed_ci(res.beta, run, t, spec.level)
                    rec["ci"][f"ci:{cm}"] = [iv.lower, iv.upper] if iv is not None else None
                except IfebootError as exc:
                    rec["ci"][f"ci:{cm}"] = None
                    rec["notes"][cm] = f"{type(exc).__name__}: {exc}"
            if spec.ape:
                from .ape import ape_bootstrap_ci

                try:
                    a = ape_bootstrap_ci(data, res, family, ape_spec, run, spec.level)
                    rec["ape"] = {
                        "truth": ape_value(data, truth, family, ape_spec),
                        "point": a.point,
                        "ci": [a.ci.lower, a.ci.upper],
                    }
                except IfebootError as exc:
                    rec["notes"]["ape"] = f"{type(exc).__name__}: {exc}"
    return rec


@dataclass(frozen=True)
class MethodRow:
    method: str
    n: int
    relative_bias: float
    sd: float
    coverage: float
    rejection: float


@dataclass(frozen=True)
class CiRow:
    method: str
    n: int
    coverage: float
    mean_length: float
    lmr: float
    umr: float
    rejection: float


@dataclass(frozen=True)
class McReport:
    spec: ScenarioSpec
    replications: int
    failures: int
    rows: tuple
    ci_rows: tuple
    ape: dict | None = None
    version: str = __version__
    wall_time: float | None = None

    def row(self, method: str) -> MethodRow:
        return next(r for r in self.rows if r.method == method)

    def ci_row(self, method: str) -> CiRow:
        return next(r for r in self.ci_rows if r.method == method)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "mc_report",
            "version": self.version,
            "spec": self.spec.to_dict(),
            "replications": self.replications,
            "failures": self.failures,
            "rows": [asdict(r) for r in self.rows],
            "ci_rows": [asdict(r) for r in self.ci_rows],
            "ape": self.ape,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "McReport":
        return cls(
            spec=ScenarioSpec.from_dict(d["spec"]),
            replications=int(d["replications"]),
            failures=int(d["failures"]),
            rows=tuple(MethodRow(**r) for r in d["rows"]),
            ci_rows=tuple(CiRow(**r) for r in d["ci_rows"]),
            ape=d.get("ape"),
            version=d.get("version", __version__),
            wall_time=d.get("wall_time"),
        )


def _rate(flags) -> float:
    return float(np.mean(flags)) if len(flags) else math.nan


def summarize(spec: ScenarioSpec, records: list) -> McReport:
    """Aggregate replication records into the report tables."""
    ok = [r for r in records if r["ok"]]
    beta0, h0 = spec.beta0, spec.h0_value
    rows = []
    for m in spec.methods:
        vals = np.array([r["est"][m] for r in ok if m in r["est"]])
        ivs = [r["ci"][m] for r in ok if r["ci"].get(m) is not None]
        rows.append(
            MethodRow(
                method=m,
                n=int(vals.size),
                relative_bias=float((vals.mean() - beta0) / beta0) if vals.size else math.nan,
                sd=float(vals.std(ddof=1)) if vals.size > 1 else math.nan,
                coverage=_rate([lo <= beta0 <= hi for lo, hi in ivs]),
                rejection=_rate([not (lo <= h0 <= hi) for lo, hi in ivs]),
            )
        )
    ci_rows = []
    for cm in spec.ci_methods:
        ivs = [r["ci"][f"ci:{cm}"] for r in ok if r["ci"].get(f"ci:{cm}") is not None]
        n = len(ivs)
        cover = sum(lo <= beta0 <= hi for lo, hi in ivs)
        lmr = sum(beta0 < lo for lo, hi in ivs)
        umr = n - cover - lmr
        ci_rows.append(
            CiRow(
                method=cm,
                n=n,
                coverage=cover / n if n else math.nan,
                mean_length=float(np.mean([hi - lo for lo, hi in ivs])) if n else math.nan,
                lmr=lmr / n if n else math.nan,
                umr=umr / n if n else math.nan,
                rejection=_rate([not (lo <= h0 <= hi) for lo, hi in ivs]),
            )
        )
    ape = None
    if spec.ape:
        a = [r["ape"] for r in ok if "ape" in r]
        if a:
            ape = {
                "n": len(a),
                "coverage": _rate([x["ci"][0] <= x["truth"] <= x["ci"][1] for x in a]),
                "mean_bias": float(np.mean([x["point"] - x["truth"] for x in a])),
            }
    return McReport(spec, len(records), len(records) - len(ok), tuple(rows), tuple(ci_rows), ape)


def _replicate_task(args):
    spec, rep = args
    return replicate(spec, rep)


def run_mc(spec: ScenarioSpec, jobs: int = 1, progress=None) -> McReport:
    """Run all replications of `spec` and aggregate.

    Replications are distributed over `jobs` worker processes; results are
    gathered by replication index, so the report does not depend on `jobs`.
    `progress`, if given, is called with ``(done, total)``.

    Raises
    ------
    TooManyFailures
        If more than ``spec.max_failure_share`` of the replications fail.
    """
    t0 = time.perf_counter()
    tasks = [(spec, r) for r in range(spec.mc_reps)]
    records = []
    if jobs <= 1:
        for i, tk in enumerate(tasks):
            records.append(_replicate_task(tk))
            if progress:
                progress(i + 1, len(tasks))
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            for i, rec in enumerate(pool.map(_replicate_task, tasks)):
                records.append(rec)
                if progress:
                    progress(i + 1, len(tasks))
    records.sort(key=lambda r: r["rep"])
    failed = sum(not r["ok"] for r in records)
    if failed > spec.max_failure_share * len(records):
        first = next(r["error"] for r in records if not r["ok"])
        raise TooManyFailures(f"{failed} of {len(records)} replications failed; first: {first}")
    rep = summarize(spec, records)
    return replace(rep, wall_time=time.perf_counter() - t0)


# -- rendering -------------------------------------------------------------------------


def _fmt(v, width=8):
    return f"{v:{width}.3f}" if isinstance(v, float) and math.isfinite(v) else f"{'-':>{width}}"


def render(report: McReport, fmt: str = "text") -> str:
    """Render a report as a text table, CSV or JSON."""
    fmt = fmt.lower()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if fmt == "csv":
        return _to_csv(report)
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    s = report.spec
    lines = [
        f"{s.family} {s.scenario.upper()}  N={s.N} T={s.T} d_f={s.d_f} beta0={s.beta0:g}  "
        f"reps={report.replications} (failed {report.failures})  B={s.B}  level={s.level:g}  H0: beta={s.h0_value:g}",
        "",
        f"{'Method':<12}{'n':>6}{'Bias':>8}{'SD':>8}{'Cover':>8}{'Reject':>8}",
    ]
    for r in report.rows:
        lines.append(f"{METHOD_LABELS[r.method]:<12}{r.n:>6}{_fmt(r.relative_bias)}{_fmt(r.sd)}{_fmt(r.coverage)}{_fmt(r.rejection)}")
    if report.ci_rows:
        lines += ["", f"{'Interval':<12}{'n':>6}{'Cover':>8}{'Length':>8}{'LMR':>8}{'UMR':>8}"]
        for r in report.ci_rows:
            lines.append(f"{CI_LABELS[r.method]:<12}{r.n:>6}{_fmt(r.coverage)}{_fmt(r.mean_length)}{_fmt(r.lmr)}{_fmt(r.umr)}")
    if report.ape:
        lines += ["", f"APE (marginal, covariate 0): n={report.ape['n']} coverage={report.ape['coverage']:.3f} mean bias={report.ape['mean_bias']:.4f}"]
    return "\n".join(lines) + "\n"


_CSV_FIELDS = ["table", "method", "n", "relative_bias", "sd", "coverage", "rejection", "mean_length", "lmr", "umr"]


def _to_csv(report: McReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["#meta", json.dumps({k: v for k, v in report.to_dict().items() if k not in ("rows", "ci_rows")}, sort_keys=True)])
    w.writerow(_CSV_FIELDS)
    for r in report.rows:
        d = asdict(r)
        w.writerow(["method"] + [repr(d[f]) if f in d and f not in ("method",) else d.get(f, "") for f in _CSV_FIELDS[1:]])
    for r in report.ci_rows:
        d = asdict(r)
        w.writerow(["ci"] + [repr(d[f]) if f in d and f not in ("method",) else d.get(f, "") for f in _CSV_FIELDS[1:]])
    return buf.getvalue()


def report_from_csv(text: str) -> McReport:
    rows = list(csv.reader(io.StringIO(text)))
    meta = json.loads(rows[0][1])
    header = rows[1]
    methods, cis = [], []
    for row in rows[2:]:
        rec = dict(zip(header, row))
        if rec["table"] == "method":
            methods.append({k: (rec[k] if k == "method" else (int(rec[k]) if k == "n" else float(rec[k]))) for k in ("method", "n", "relative_bias", "sd", "coverage", "rejection")})
        else:
            cis.append({k: (rec[k] if k == "method" else (int(rec[k]) if k == "n" else float(rec[k]))) for k in ("method", "n", "coverage", "mean_length", "lmr", "umr", "rejection")})
    meta["rows"] = methods
    meta["ci_rows"] = cis
    return McReport.from_dict(meta)


def report_from_json(text: str) -> McReport:
    return McReport.from_dict(json.loads(text))
