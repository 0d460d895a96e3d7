"""Parametric bootstrap: resampling at the fitted model, bias correction, intervals."""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ape import EffectSpec, ape_value
from .errors import (
    AllReplicatesFailed,
    DomainError,
    EmptyRun,
    IfebootError,
    InverseOutOfDomain,
    TooFewReplicates,
)
from .estimator import EstimatorOptions, FitResult, fit
from .likelihood import Family, index
from .panel import PanelData

__all__ = [
    "BootstrapRun",
    "ConfidenceInterval",
    "Transform",
    "replicate_rng",
    "sample_dgp",
    "run_bootstrap",
    "bias_correct",
    "ecdf",
    "empirical_quantile",
    "reflected_interval",
    "quantile_ci",
    "apply_transform",
    "invert_transform",
    "sample_skewness",
    "select_lambda",
    "transformed_ci",
    "LAMBDA_GRID",
]

LAMBDA_GRID = np.round(np.arange(-200, 201) / 100.0, 2)


# -- resampling ------------------------------------------------------------------


def replicate_rng(master_seed: int, b: int) -> np.random.Generator:
    """Generator for replicate `b`; depends only on ``(master_seed, b)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(master_seed), spawn_key=(int(b),))))


def sample_dgp(data: PanelData, fit_result: FitResult, family, rng: np.random.Generator) -> PanelData:
    """Draw ``Y*_it ~ Bernoulli(F(Z_hat_it))`` independently, keeping X fixed."""
    family = Family.parse(family)
    p = family.cdf(index(data, fit_result.params))
    u = rng.random(p.shape)
    return data.with_outcome((u < p).astype(float))


@dataclass(frozen=True)
class BootstrapRun:
    """Outcome of :func:`run_bootstrap`.

    ``beta_reps`` and ``ape_reps`` hold successful replicates only, in
    replicate order; ``replicates`` lists their indices and ``failures`` the
    indices of replicates that raised or did not converge.
    """

    b_count: int
    master_seed: int
    beta_hat: np.ndarray
    beta_reps: np.ndarray
    replicates: tuple
    failures: tuple
    ape_hat: float | None = None
    ape_reps: np.ndarray | None = None
    failure_messages: dict = field(default_factory=dict)

    @property
    def b_effective(self) -> int:
        return len(self.replicates)

    @property
    def seeds(self) -> tuple:
        """Stream identifiers ``(master_seed, b)`` of every attempted replicate."""
        return tuple((self.master_seed, b) for b in range(self.b_count))


def _one_replicate(args):
    b, data, fit_result, family, d_f, options, master_seed, cold_start, ape_spec = args
    rng = replicate_rng(master_seed, b)
    star = sample_dgp(data, fit_result, family, rng)
    try:
        if cold_start:
            res = fit(star, family, d_f, options)
        else:
            res = fit(star, family, d_f, options, warm_start=fit_result.params)
    except (IfebootError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return b, None, None, f"{type(exc).__name__}: {exc}"
    if not res.converged:
        return b, None, None, f"not converged ({res.stop_reason})"
    if not np.isfinite(res.beta).all():
        return b, None, None, "non-finite estimate"
    ape = ape_value(star, res.params, family, ape_spec) if ape_spec is not None else None
    return b, res.beta, ape, None


def run_bootstrap(
    data: PanelData,
    fit_result: FitResult,
    family=None,
    B: int = 399,
    seed: int = 0,
    jobs: int = 1,
    options: EstimatorOptions | None = None,
    cold_start: bool = False,
    ape_spec: EffectSpec | None = None,
) -> BootstrapRun:
    """Parametric bootstrap of the two-step estimator.

    Replicate b draws outcomes with :func:`replicate_rng` ``(seed, b)`` and
    refits with the same number of factors, starting from the original
    estimate (or from scratch with ``cold_start=True``). Since every stream is
    addressed by its index, the result does not depend on `jobs` or on the
    order in which replicates finish.

    Raises
    ------
    AllReplicatesFailed
        If no replicate produced a converged estimate.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    family = Family.parse(family if family is not None else fit_result.family)
    d_f = fit_result.d_f
    tasks = [(b, data, fit_result, family, d_f, options, seed, cold_start, ape_spec) for b in range(B)]
    if jobs <= 1:
        results = [_one_replicate(tk) for tk in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            results = list(pool.map(_one_replicate, tasks, chunksize=max(1, B // (4 * jobs))))
    results.sort(key=lambda r: r[0])
    ok = [r for r in results if r[3] is None]
    failed = {r[0]: r[3] for r in results if r[3] is not None}
    if not ok:
        raise AllReplicatesFailed(f"all {B} bootstrap replicates failed; first error: {next(iter(failed.values()))}")
    beta_reps = np.vstack([r[1] for r in ok])
    ape_reps = np.array([r[2] for r in ok]) if ape_spec is not None else None
    ape_hat = ape_value(data, fit_result.params, family, ape_spec) if ape_spec is not None else None
    return BootstrapRun(
        b_count=B,
        master_seed=int(seed),
        beta_hat=fit_result.beta.copy(),
        beta_reps=beta_reps,
        replicates=tuple(r[0] for r in ok),
        failures=tuple(sorted(failed)),
        ape_hat=ape_hat,
        ape_reps=ape_reps,
        failure_messages=failed,
    )


def bias_correct(beta_hat, run: BootstrapRun, mode: str = "mean") -> np.ndarray:
    """``2 beta_hat - mean(beta*)`` or ``2 beta_hat - median(beta*)``, componentwise."""
    if isinstance(beta_hat, FitResult):
        beta_hat = beta_hat.beta
    reps = np.asarray(run.beta_reps if isinstance(run, BootstrapRun) else run, dtype=float)
    if reps.size == 0:
        raise EmptyRun("no successful bootstrap replicates")
    mode = mode.lower()
    if mode == "mean":
        center = reps.mean(axis=0)
    elif mode == "median":
        center = np.median(reps, axis=0)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'mean' or 'median'")
    return 2.0 * np.asarray(beta_hat, dtype=float) - center


# -- quantiles and intervals ---------------------------------------------------------


def ecdf(values, x) -> float:
    """Empirical distribution function ``#{v <= x} / n``."""
    v = np.sort(np.asarray(values, dtype=float))
    return np.searchsorted(v, x, side="right") / v.size


def empirical_quantile(values, a: float) -> float:
    """Left-continuous inverse ``inf{x : F(x) >= a}`` of the empirical cdf.

    No interpolation: the result is always one of the values. For ``a <= 0``
    the smallest value is returned.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if n == 0:
        raise EmptyRun("no values")
    # round away representation noise so that exact multiples of 1/n stay exact
    pos = math.ceil(round(a * n, 9))
    return float(v[min(max(pos, 1), n) - 1])


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: str
    transform: "Transform | None" = None
    clamped: tuple = ()

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"interval endpoints out of order: {self.lower} > {self.upper}")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def miss(self, value: float) -> str | None:
        """``"lower"`` if the interval lies entirely above `value`, ``"upper"`` if below, else None."""
        if value < self.lower:
            return "lower"
        if value > self.upper:
            return "upper"
        return None


def _check_level(level):
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must lie in [0, 1]")


def reflected_interval(center: float, reps, level: float, method: str = "bootstrap", min_reps: int = 20) -> ConfidenceInterval:
    """``[2 c - Q*(1 - a/2), 2 c - Q*(a/2)]`` with ``a = 1 - level``."""
    _check_level(level)
    reps = np.asarray(reps, dtype=float)
    if reps.size < min_reps:
        raise TooFewReplicates(f"{reps.size} replicates, need at least {min_reps}")
    a = 1.0 - level
    lo = 2.0 * center - empirical_quantile(reps, 1.0 - a / 2.0)
    hi = 2.0 * center - empirical_quantile(reps, a / 2.0)
    return ConfidenceInterval(lo, hi, level, method)


def quantile_ci(beta_hat, run, level: float = 0.95, k: int = 0, min_reps: int = 20) -> ConfidenceInterval:
    """Reflected percentile interval for component `k` of beta."""
    if isinstance(beta_hat, FitResult):
        beta_hat = beta_hat.beta
    reps = np.asarray(run.beta_reps if isinstance(run, BootstrapRun) else run, dtype=float)
    reps = reps[:, k] if reps.ndim == 2 else reps
    return reflected_interval(float(np.atleast_1d(beta_hat)[k]), reps, level, "bootstrap", min_reps)


# -- transformations ---------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """Strictly increasing map used to build transformed intervals.

    ``kind`` is one of ``"identity"``, ``"log"``, ``"boxcox"``,
    ``"yeojohnson"``; ``lam`` is the power parameter of the last two.
    """

    kind: str = "identity"
    lam: float | None = None

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "").replace("_", "")
        if kind not in ("identity", "log", "boxcox", "yeojohnson"):
            raise ValueError(f"unknown transform {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind in ("boxcox", "yeojohnson"):
            if self.lam is None:
                object.__setattr__(self, "lam", 1.0)
            if not -2.0 <= float(self.lam) <= 2.0:
                raise ValueError("lambda must lie in [-2, 2]")
            object.__setattr__(self, "lam", float(self.lam))

    def apply(self, x):
        return apply_transform(self, x)

    def invert(self, y):
        return invert_transform(self, y)

    def range_bounds(self) -> tuple[float, float]:
        """Open interval of attainable transformed values."""
        lam = self.lam
        if self.kind == "boxcox" and lam != 0.0:
            return (-1.0 / lam, math.inf) if lam > 0 else (-math.inf, -1.0 / lam)
        if self.kind == "yeojohnson":
            lo = 1.0 / (2.0 - lam) if lam > 2.0 else -math.inf
            hi = -1.0 / lam if lam < 0.0 else math.inf
            return lo, hi
        return -math.inf, math.inf

    def domain_bounds(self) -> tuple[float, float]:
        if self.kind in ("log", "boxcox"):
            return 0.0, math.inf
        return -math.inf, math.inf

    def describe(self) -> str:
        return self.kind if self.lam is None else f"{self.kind}({self.lam:g})"


def _power_minus_one(base, log_base, lam):
    # u**lam - 1: expm1 where it cancels, plain power elsewhere (exact for lam = 1)
    e = lam * log_base
    return np.where(np.abs(e) < 0.5, np.expm1(e), np.power(base, lam) - 1.0)


def apply_transform(t: Transform, x):
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if t.kind == "identity":
        out = x.copy()
    elif t.kind in ("log", "boxcox"):
        if not (x > 0).all():
            raise DomainError(f"{t.kind} transform needs positive inputs")
        if t.kind == "log" or t.lam == 0.0:
            out = np.log(x)
        else:
            out = _power_minus_one(x, np.log(x), t.lam) / t.lam
    else:
        lam = t.lam
        out = np.empty_like(x)
        pos = x >= 0
        xp, xn = x[pos], x[~pos]
        out[pos] = np.log1p(xp) if lam == 0.0 else _power_minus_one(1.0 + xp, np.log1p(xp), lam) / lam
        out[~pos] = -np.log1p(-xn) if lam == 2.0 else -_power_minus_one(1.0 - xn, np.log1p(-xn), 2.0 - lam) / (2.0 - lam)
    return float(out[0]) if scalar else out


def invert_transform(t: Transform, y):
    """Inverse map; raises :class:`InverseOutOfDomain` outside the range."""
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    lo, hi = t.range_bounds()
    if not ((y > lo) & (y < hi)).all() and not (np.isinf(lo) and np.isinf(hi)):
        raise InverseOutOfDomain(f"value outside the range ({lo}, {hi}) of {t.describe()}")
    if t.kind == "identity":
        out = y.copy()
    elif t.kind == "log" or (t.kind == "boxcox" and t.lam == 0.0):
        out = np.exp(y)
    elif t.kind == "boxcox":
        out = np.exp(np.log1p(t.lam * y) / t.lam)
    else:
        lam = t.lam
        out = np.empty_like(y)
        pos = y >= 0
        yp, yn = y[pos], y[~pos]
        out[pos] = np.expm1(yp) if lam == 0.0 else np.expm1(np.log1p(lam * yp) / lam)
        out[~pos] = -np.expm1(-yn) if lam == 2.0 else -np.expm1(np.log1p(-(2.0 - lam) * yn) / (2.0 - lam))
    return float(out[0]) if scalar else out


def sample_skewness(v) -> float:
    """Third central moment over the second to the power 3/2 (population moments)."""
    v = np.asarray(v, dtype=float)
    c = v - v.mean()
    m2 = np.mean(c * c)
    if not m2 > 0:
        return 0.0
    return float(np.mean(c**3) / m2**1.5)


def select_lambda(run, kind: str, k: int = 0, grid=None, tie_tol: float = 1e-10) -> Transform:
    """Power parameter minimizing the absolute skewness of the transformed replicates.

    The search runs over `grid` (default ``-2, -1.99, ..., 2``). Values of
    ``|skew|`` within `tie_tol` of the minimum count as ties, resolved toward
    ``lambda = 1``.

    Raises
    ------
    DomainError
        For Box-Cox when some replicate is not positive.
    """
    reps = np.asarray(run.beta_reps if isinstance(run, BootstrapRun) else run, dtype=float)
    reps = reps[:, k] if reps.ndim == 2 else reps
    grid = LAMBDA_GRID if grid is None else np.asarray(grid, dtype=float)
    if kind.lower().replace("-", "") == "boxcox" and not (reps > 0).all():
        raise DomainError("Box-Cox needs positive bootstrap replicates")
    skew = np.array([abs(sample_skewness(apply_transform(Transform(kind, lam), reps))) for lam in grid])
    skew = np.where(np.isfinite(skew), skew, np.inf)
    best = skew.min()
    ties = np.flatnonzero(skew <= best + tie_tol)
    lam = grid[ties[np.argmin(np.abs(grid[ties] - 1.0))]]
    return Transform(kind, float(lam))


def transformed_ci(beta_hat, run, t: Transform, level: float = 0.95, k: int = 0, min_reps: int = 20, strict: bool = False) -> ConfidenceInterval:
    """Interval built in transformed space and mapped back.

    ``[t^{-1}(2 t(b) - Q*_{t(b*)}(1 - a/2)), t^{-1}(2 t(b) - Q*_{t(b*)}(a/2))]``.
    With the identity transform this is exactly :func:`quantile_ci`. An
    endpoint whose transformed value has no preimage is clamped to the edge of
    the domain and listed in ``clamped`` (or raises with ``strict=True``).
    """
    if isinstance(beta_hat, FitResult):
        beta_hat = beta_hat.beta
    b = float(np.atleast_1d(beta_hat)[k])
    reps = np.asarray(run.beta_reps if isinstance(run, BootstrapRun) else run, dtype=float)
    reps = reps[:, k] if reps.ndim == 2 else reps
    tb = apply_transform(t, b)
    treps = apply_transform(t, reps)
    raw = reflected_interval(tb, treps, level, min_reps=min_reps)
    dlo, dhi = t.domain_bounds()
    ends, clamped = [], []
    for name, val, edge in (("lower", raw.lower, dlo), ("upper", raw.upper, dhi)):
        try:
            ends.append(invert_transform(t, val))
        except InverseOutOfDomain:
            if strict:
                raise
            # no preimage: the endpoint lies beyond the image of the domain
            lo, hi = t.range_bounds()
            ends.append(dlo if val <= lo else dhi if val >= hi else edge)
            clamped.append(name)
    return ConfidenceInterval(ends[0], ends[1], level, f"bootstrap-{t.kind}", t, tuple(clamped))
