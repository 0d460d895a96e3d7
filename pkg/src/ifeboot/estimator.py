"""Two-step estimator for binary-choice panels with interactive fixed effects.

Step one solves a convex relaxation in which the N x T effect matrix is
unrestricted but penalized by its nuclear norm; the tuning constant is chosen
from the data. Step two extracts d_f factors from the penalized solution by
SVD and runs gradient ascent on the unpenalized log-likelihood from there.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from . import _kernels
from .errors import DimensionMismatch, MaxIterations, Nonconvergence, StepSizeUnderflow
from .likelihood import FactorParams, Family, index, score_blocks, xb
from .panel import PanelData

__all__ = [
    "EstimatorOptions",
    "TwoWayFit",
    "NucStageResult",
    "FitResult",
    "FactorSelection",
    "RankDeficientWarning",
    "op_norm",
    "svt",
    "twoway_init",
    "tuning_select",
    "fit_nuclear",
    "nuclear_objective",
    "extract_factors",
    "refine",
    "fit",
    "eigenvalue_ratio",
    "select_num_factors",
    "plain_ml",
    "full_hessian",
]


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EstimatorOptions:
    """Numerical settings for every stage of :func:`fit`."""

    # two-way additive initialization
    twoway_tol: float = 1e-6
    twoway_max_iter: int = 500
    # nuclear-norm stage
    phi_init_scale: float = 0.5
    phi_update_scale: float = 1.05
    nuc_rel_tol: float = 1e-9
    nuc_prox_tol: float = 1e-6
    nuc_max_iter: int = 10000
    # gradient refinement
    refine_method: str = "gradient"
    refine_tol: float = 1e-6
    refine_stall_tol: float = 1e-5
    refine_max_iter: int = 5000
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    min_step_scale: float = 1e-12
    # factor-number selection
    r_max: int = 8
    zero_factor_c0: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def op_norm(g: np.ndarray) -> float:
    """Largest singular value."""
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        return 0.0
    return float(np.linalg.norm(g, 2))


def svt(m: np.ndarray, threshold: float) -> np.ndarray:
    """Singular-value soft-thresholding: shrink every singular value by `threshold`."""
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.maximum(s - threshold, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def _max_eig_xx(x: np.ndarray) -> float:
    """Largest eigenvalue of ``sum_it X_it X_it'``."""
    if x.shape[0] == 0:
        return 0.0
    flat = x.reshape(x.shape[0], -1)
    return float(np.linalg.eigvalsh(flat @ flat.T)[-1])


def plain_ml(data: PanelData, family, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Pooled ML estimate of beta with no effects at all (Newton with backtracking)."""
    family = Family.parse(family)
    x = data.x.reshape(data.n_covariates, -1)
    y = data.y.ravel()
    beta = np.zeros(data.n_covariates)
    ll = family.logpmf(y, beta @ x).sum()
    for _ in range(max_iter):
        d1, d2, _ = family.cell_derivs(y, beta @ x)
        g = x @ d1
        if np.max(np.abs(g), initial=0.0) <= tol:
            return beta
        h = (x * d2) @ x.T
        step = np.linalg.solve(-h, g)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = family.logpmf(y, cand @ x).sum()
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
    raise MaxIterations(f"pooled ML did not converge in {max_iter} iterations")


# -- two-way additive effects --------------------------------------------------


@dataclass(frozen=True)
class TwoWayFit:
    """Additive two-way fixed-effects fit ``X'beta + a_i + g_t`` with ``sum_t g_t = 0``."""

    beta: np.ndarray
    unit_effects: np.ndarray
    period_effects: np.ndarray
    iterations: int

    @property
    def sigma(self) -> np.ndarray:
        return self.unit_effects[:, None] + self.period_effects[None, :]

    def __iter__(self):
        yield self.beta
        yield self.sigma


def twoway_init(data: PanelData, family, tol: float = 1e-6, max_iter: int = 500) -> TwoWayFit:
    """Maximize the additive two-way effects likelihood by damped Newton.

    Raises
    ------
    Nonconvergence
        If the iteration budget is exhausted or every cell ends up predicted
        with certainty (the data are separated and no finite maximizer exists).
    """
    family = Family.parse(family)
    n, t = data.shape
    k = data.n_covariates
    x, y = data.x, data.y
    beta = np.zeros(k)
    a = np.zeros(n)
    g = np.zeros(t)
    # null direction of the Hessian: (a + c, g - c)
    v = np.concatenate([np.zeros(k), np.ones(n), -np.ones(t)])
    v /= np.linalg.norm(v)

    def index(beta, a, g):
        return xb(x, beta) + a[:, None] + g[None, :]

    z = index(beta, a, g)
    ll = family.logpmf(y, z).sum()
    for it in range(max_iter + 1):
        d1, d2, _ = family.cell_derivs(y, z)
        grad = np.concatenate([score_blocks(x, d1, np.zeros((n, 0)), np.zeros((t, 0)))[0], d1.sum(1), d1.sum(0)])
        if np.max(np.abs(grad)) <= tol:
            break
        if it == max_iter:
            raise Nonconvergence(f"two-way initialization did not converge in {max_iter} iterations")
        xd = x * d2
        hbb = np.tensordot(xd, x, axes=([1, 2], [1, 2]))
        hba = xd.sum(axis=2)
        hbg = xd.sum(axis=1)
        h = np.block(
            [
                [hbb, hba, hbg],
                [hba.T, np.diag(d2.sum(1)), d2],
                [hbg.T, d2.T, np.diag(d2.sum(0))],
            ]
        )
        scale = np.abs(np.diag(h)).mean()
        step = np.linalg.solve(-h + scale * np.outer(v, v), grad)
        s = 1.0
        slope = grad @ step
        while True:
            nb, na, ng = beta + s * step[:k], a + s * step[k : k + n], g + s * step[k + n :]
            zn = index(nb, na, ng)
            ll_new = family.logpmf(y, zn).sum()
            if ll_new >= ll + 1e-4 * s * slope or s < 1e-10:
                break
            s *= 0.5
        beta, a, g, z, ll = nb, na, ng, zn, ll_new
    # every cell fitted with certainty: separated data, no finite maximizer
    if np.all(np.abs(family.score(y, z)) < 1e-6):
        raise Nonconvergence("two-way fit separates the data perfectly; no finite maximizer")
    c = g.mean()
    return TwoWayFit(beta, a + c, g - c, it)


# -- nuclear-norm penalized stage ------------------------------------------------


@dataclass(frozen=True)
class NucStageResult:
    """Solution of the nuclear-norm penalized problem.

    ``objective_trace`` records ``(L(beta, Sigma) - phi ||Sigma||_*) / NT`` at
    every accepted iterate.
    """

    beta_nuc: np.ndarray
    sigma_nuc: np.ndarray
    phi: float
    iterations: int
    objective_trace: np.ndarray
    prox_residual: float
    converged: bool
    tuning_initial: float | None = None
    tuning_final: float | None = None


def nuclear_objective(data: PanelData, family, beta, sigma, phi) -> float:
    """Penalized objective ``(L(beta, Sigma) - phi * ||Sigma||_*) / NT``."""
    family = Family.parse(family)
    z = xb(data.x, np.asarray(beta, dtype=float)) + sigma
    nuc = np.linalg.svd(sigma, compute_uv=False).sum()
    return float((family.logpmf(data.y, z).sum() - phi * nuc) / data.y.size)


def fit_nuclear(data: PanelData, family, phi: float, init=None, options: EstimatorOptions | None = None) -> NucStageResult:
    """Maximize ``L(beta, Sigma) - phi ||Sigma||_*`` over beta and an unrestricted Sigma.

    `phi` is expressed in the units of the raw per-cell scores: ``Sigma = 0``
    is optimal exactly when the score matrix at ``Sigma = 0`` (and the
    corresponding beta) has operator norm at most `phi`.

    The solver is a monotone accelerated proximal gradient method with
    block-diagonal step sizes and backtracking.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    opts = options or EstimatorOptions()
    family = Family.parse(family)
    x, y = data.x, data.y
    n, t = data.shape
    nt = y.size
    bbar = family.curvature_bound
    lx = _max_eig_xx(x)
    # safe block steps; the joint preconditioned Lipschitz constant is at most 2
    d_beta = 1.0 / (bbar * lx) if lx > 0 else 0.0
    d_sig = 1.0 / bbar

    if init is None:
        beta = np.zeros(data.n_covariates)
        sigma = np.zeros((n, t))
    else:
        beta = np.array(init[0], dtype=float)
        sigma = np.array(init[1], dtype=float)

    def smooth(beta, sigma):
        return family.logpmf(y, xb(x, beta) + sigma).sum()

    def penalized(beta, sigma, sv=None):
        if sv is None:
            sv = np.linalg.svd(sigma, compute_uv=False)
        return smooth(beta, sigma) - phi * sv.sum()

    def grads(beta, sigma):
        d1 = family.score(y, xb(x, beta) + sigma)
        gb = np.tensordot(x, d1, axes=([1, 2], [0, 1])) if x.shape[0] else np.zeros(0)
        return gb, d1

    def prox_step(yb, ys, fy, gb, gs, scale):
        nb = yb + scale * d_beta * gb
        u, s, vt = np.linalg.svd(ys + scale * d_sig * gs, full_matrices=False)
        s = np.maximum(s - scale * d_sig * phi, 0.0)
        keep = s > 0
        ns = (u[:, keep] * s[keep]) @ vt[keep]
        fn = smooth(nb, ns)
        db, ds = nb - yb, ns - ys
        quad = (db @ db / d_beta if d_beta > 0 else 0.0) + np.vdot(ds, ds) / d_sig
        lin = gb @ db + np.vdot(gs, ds)
        ok = fn >= fy + lin - quad / (2.0 * scale) - 1e-12 * abs(fy)
        return nb, ns, s, fn, ok

    obj = penalized(beta, sigma)
    trace = [obj / nt]
    xb_prev, xs_prev = beta, sigma
    yb, ys = beta, sigma
    tk = 1.0
    scale = 1.0
    residual = np.inf
    converged = False
    it = 0
    for it in range(1, opts.nuc_max_iter + 1):
        fy = smooth(yb, ys)
        gb, gs = grads(yb, ys)
        while True:
            zb, zs, sv, fz, ok = prox_step(yb, ys, fy, gb, gs, scale)
            if ok:
                break
            scale *= 0.5
            if scale < opts.min_step_scale:
                raise StepSizeUnderflow("nuclear-norm stage: backtracking step underflow")
        obj_z = fz - phi * sv.sum()
        # gradient-mapping residual at the extrapolated point, raw score units
        rb = np.max(np.abs(zb - yb)) / (scale * d_beta) if d_beta > 0 and zb.size else 0.0
        rs = np.max(np.abs(zs - ys)) / (scale * d_sig)
        residual = max(rb, rs)
        # monotone safeguard: keep the better of the prox point and the last iterate
        tk_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        if obj_z >= obj:
            nb, ns, nobj = zb, zs, obj_z
        else:
            nb, ns, nobj = beta, sigma, obj
        yb = nb + (tk / tk_next) * (zb - nb) + ((tk - 1.0) / tk_next) * (nb - beta)
        ys = ns + (tk / tk_next) * (zs - ns) + ((tk - 1.0) / tk_next) * (ns - sigma)
        rel = abs(nobj - obj) / max(1.0, abs(obj))
        beta, sigma, obj, tk = nb, ns, nobj, tk_next
        trace.append(obj / nt)
        if rel <= opts.nuc_rel_tol and residual <= opts.nuc_prox_tol:
            converged = True
            break
        # let the step grow back after early backtracking
        scale = min(1.0, scale * 1.2)
    if not converged:
        raise MaxIterations(f"nuclear-norm stage did not converge in {opts.nuc_max_iter} iterations (residual {residual:.2e})")
    return NucStageResult(beta, sigma, float(phi), it, np.asarray(trace), float(residual), converged)


def _score_matrix(data: PanelData, family: Family, beta, sigma) -> np.ndarray:
    return family.score(data.y, xb(data.x, beta) + sigma)


def extract_factors(sigma: np.ndarray, d_f: int, fill_null: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Rank-d_f factor split of `sigma` by truncated SVD.

    Loadings and factors each carry the square roots of the retained singular
    values, so ``alpha @ gamma.T`` is the best rank-d_f approximation of
    `sigma` in Frobenius norm.

    With ``fill_null=True``, a retained direction whose singular value is
    numerically zero gets the loading column ``sqrt(N) u_r`` and a zero factor
    column. The product is unchanged, but the point is no longer a saddle at
    which the likelihood gradient in both columns vanishes identically.
    """
    sigma = np.asarray(sigma, dtype=float)
    n, t = sigma.shape
    if d_f < 0 or d_f > min(n, t):
        raise DimensionMismatch(f"d_f={d_f} must lie in [0, {min(n, t)}]")
    if d_f == 0:
        return np.zeros((n, 0)), np.zeros((t, 0))
    u, s, vt = np.linalg.svd(sigma, full_matrices=False)
    s = s[:d_f]
    null = s <= 1e-10 * s[0] if s[0] > 0 else np.ones(d_f, dtype=bool)
    if s[0] > 0 and null.any():
        warnings.warn(f"sigma has numerical rank below d_f={d_f}", RankDeficientWarning, stacklevel=2)
    root = np.sqrt(s)
    alpha, gamma = u[:, :d_f] * root, vt[:d_f].T * root
    if fill_null and null.any():
        alpha[:, null] = u[:, :d_f][:, null] * np.sqrt(n)
        gamma[:, null] = 0.0
    return alpha, gamma


def tuning_select(data: PanelData, family, beta_init, sigma_init, d_f: int = 1, options: EstimatorOptions | None = None):
    """Data-driven penalty level.

    The initial value is ``0.5 * ||S(beta_init, sigma_init)||_op`` with S the
    N x T matrix of per-cell scores. The penalized problem is solved once at
    that level, its solution is truncated to rank `d_f`, and the final value
    is ``1.05 * ||S||_op`` at the truncated solution.

    Returns
    -------
    phi_tilde, phi_hat : float
    stage : NucStageResult
        The interim penalized fit at ``phi_tilde``.
    """
    opts = options or EstimatorOptions()
    family = Family.parse(family)
    g0 = _score_matrix(data, family, np.asarray(beta_init, float), np.asarray(sigma_init, float))
    phi_tilde = opts.phi_init_scale * op_norm(g0)
    if not phi_tilde > 0:
        raise Nonconvergence("score matrix at the initial values is zero; cannot set the penalty level")
    stage = fit_nuclear(data, family, phi_tilde, init=(beta_init, sigma_init), options=opts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        a, g = extract_factors(stage.sigma_nuc, d_f)
    g1 = _score_matrix(data, family, stage.beta_nuc, a @ g.T)
    phi_hat = opts.phi_update_scale * op_norm(g1)
    return phi_tilde, phi_hat, stage


# -- unpenalized refinement ------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Refined estimate ``theta_hat = (beta, alpha, gamma)`` and diagnostics."""

    params: FactorParams
    loglik: float
    loglik_trace: np.ndarray
    grad_norms: dict
    converged: bool
    iterations: int
    family: Family
    stop_reason: str = "gradient"
    nuc: NucStageResult | None = None
    tuning: tuple | None = None
    extras: dict = field(default_factory=dict)

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def d_f(self) -> int:
        return self.params.d_f


def full_hessian(x: np.ndarray, d1: np.ndarray, d2: np.ndarray, alpha: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Hessian of the log-likelihood in ``(beta, vec(alpha), vec(gamma))``.

    Parameters are ordered as beta, then alpha row by row, then gamma row by
    row, matching :func:`_pack`.
    """
    k = x.shape[0]
    n, d = alpha.shape
    t = gamma.shape[0]
    p = k + (n + t) * d
    h = np.empty((p, p))
    xw = x * d2
    sa, sg = slice(k, k + n * d), slice(k + n * d, p)
    h[:k, :k] = np.tensordot(xw, x, axes=([1, 2], [1, 2]))
    h[:k, sa] = np.einsum("kit,tr->kir", xw, gamma).reshape(k, n * d)
    h[:k, sg] = np.einsum("kit,ir->ktr", xw, alpha).reshape(k, t * d)
    haa = np.einsum("it,tr,ts->irs", d2, gamma, gamma)
    hgg = np.einsum("it,ir,is->trs", d2, alpha, alpha)
    h[sa, sa] = 0.0
    h[sg, sg] = 0.0
    for r in range(d):
        for q in range(d):
            h[k + r : k + n * d : d, k + q : k + n * d : d] = np.diag(haa[:, r, q])
            h[k + n * d + r :: d, k + n * d + q :: d] = np.diag(hgg[:, r, q])
    hag = (d2[:, None, :, None] * gamma.T[None, :, :, None]) * alpha[:, None, None, :]
    hag += d1[:, None, :, None] * np.eye(d)[None, :, None, :]
    h[sa, sg] = hag.reshape(n * d, t * d)
    h[sa, :k] = h[:k, sa].T
    h[sg, :k] = h[:k, sg].T
    h[sg, sa] = h[sa, sg].T
    return h


def _pack(gb, ga, gg):
    return np.concatenate([gb, ga.ravel(), gg.ravel()])


def _newton_direction(neg_h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``(-H + mu I) delta = g`` with the smallest mu (on a grid) that makes the matrix PD.

    The factor split ``alpha A, gamma A^{-T}`` leaves the likelihood unchanged,
    so ``-H`` is singular at every point; the shift also takes care of that.
    """
    scale = max(float(np.max(np.abs(np.diag(neg_h)))), 1e-300)
    mu = 1e-10 * scale
    eye = np.eye(neg_h.shape[0])
    while True:
        try:
            c = linalg.cho_factor(neg_h + mu * eye, lower=True, check_finite=False)
            return linalg.cho_solve(c, g, check_finite=False)
        except linalg.LinAlgError:
            mu *= 10.0
            if mu > 1e6 * scale:
                return g / scale


def refine(data: PanelData, family, init: FactorParams, options: EstimatorOptions | None = None) -> FitResult:
    """Monotone ascent on (beta, alpha, gamma) of the unpenalized log-likelihood.

    Two search directions are available through ``options.refine_method``:

    ``"gradient"`` (default)
        Plain gradient with block steps ``1 / (b * lambda_max(sum X X'))``
        for beta and ``1 / (b * max(lambda_max(gamma'gamma),
        lambda_max(alpha'alpha)))`` for the effects, b the curvature bound of
        the family.
    ``"newton"``
        The Hessian shifted by the smallest multiple of the identity that
        makes its negative positive definite.

    Either direction is scaled back by Armijo backtracking (factor
    ``armijo_shrink``, slope constant ``armijo_c``), so the log-likelihood
    never decreases.

    The run is declared converged when every block gradient has sup-norm at
    most ``refine_tol * (1 + |L|)`` (``stop_reason="gradient"``) or when one
    accepted step raises the log-likelihood by at most
    ``refine_stall_tol * (1 + |L|)`` (``stop_reason="objective"``). The second
    rule matters in small panels: when some cells can be fitted perfectly the
    supremum of the likelihood is approached only as a few loadings and
    factors diverge, the gradient decays slowly, and the first rule is never
    met even though beta has settled. Running out of iterations returns the
    last iterate with ``converged=False``.
    """
    opts = options or EstimatorOptions()
    family = Family.parse(family)
    if opts.refine_method not in ("newton", "gradient"):
        raise ValueError(f"unknown refine_method {opts.refine_method!r}")
    x, y = data.x, data.y
    n, t = data.shape
    k = data.n_covariates
    if init.beta.shape[0] != k or init.alpha.shape[0] != n or init.gamma.shape[0] != t:
        raise DimensionMismatch("initial parameters do not match the panel")
    if opts.refine_method == "gradient":
        return _refine_gradient(data, family, init, opts)

    d = init.d_f
    beta, alpha, gamma = init.beta.copy(), init.alpha.copy(), init.gamma.copy()
    z = xb(x, beta) + alpha @ gamma.T
    ll = family.logpmf(y, z).sum()
    trace = [ll]
    stop = "max_iter"
    it = 0
    while True:
        d1, d2, _ = family.cell_derivs(y, z)
        gb, ga, gg = score_blocks(x, d1, alpha, gamma)
        gmax = max(
            np.max(np.abs(gb), initial=0.0),
            np.max(np.abs(ga), initial=0.0),
            np.max(np.abs(gg), initial=0.0),
        )
        if gmax <= opts.refine_tol * (1.0 + abs(ll)):
            stop = "gradient"
            break
        if it == opts.refine_max_iter:
            break
        g = _pack(gb, ga, gg)
        direction = _newton_direction(-full_hessian(x, d1, d2, alpha, gamma), g)
        db = direction[:k]
        da = direction[k : k + n * d].reshape(n, d)
        dg = direction[k + n * d :].reshape(t, d)
        slope = g @ direction
        step = 1.0
        while True:
            nb, na, ng = beta + step * db, alpha + step * da, gamma + step * dg
            zn = xb(x, nb) + na @ ng.T
            ll_new = family.logpmf(y, zn).sum()
            if ll_new >= ll + opts.armijo_c * step * slope:
                break
            step *= opts.armijo_shrink
            if step < opts.min_step_scale:
                break
        if not ll_new > ll:
            stop = "objective"
            break
        gain = (ll_new - ll) / (1.0 + abs(ll_new))
        beta, alpha, gamma, z, ll = nb, na, ng, zn, ll_new
        trace.append(ll)
        it += 1
        if gain <= opts.refine_stall_tol:
            gb, ga, gg = score_blocks(x, family.score(y, z), alpha, gamma)
            stop = "objective"
            break

    grad_norms = {
        "beta": float(np.max(np.abs(gb), initial=0.0)),
        "alpha": float(np.max(np.abs(ga), initial=0.0)),
        "gamma": float(np.max(np.abs(gg), initial=0.0)),
    }
    return FitResult(
        params=FactorParams(beta, alpha, gamma),
        loglik=float(ll),
        loglik_trace=np.asarray(trace),
        grad_norms=grad_norms,
        converged=stop != "max_iter",
        iterations=it,
        family=family,
        stop_reason=stop,
    )


_STOP_NAMES = {_kernels.STOP_GRADIENT: "gradient", _kernels.STOP_OBJECTIVE: "objective", _kernels.STOP_MAX_ITER: "max_iter"}


def _refine_gradient(data: PanelData, family: Family, init: FactorParams, opts: EstimatorOptions) -> FitResult:
    lx = _max_eig_xx(data.x)
    bbar = family.curvature_bound
    s_beta = 1.0 / (bbar * lx) if lx > 0 else 0.0
    fam = _kernels.LOGIT if family is Family.LOGIT else _kernels.PROBIT
    beta, alpha, gamma, trace, it, stop, gsup = _kernels.gradient_refine(
        fam,
        np.ascontiguousarray(data.x),
        np.ascontiguousarray(data.y),
        np.ascontiguousarray(init.beta, dtype=float),
        np.ascontiguousarray(init.alpha, dtype=float),
        np.ascontiguousarray(init.gamma, dtype=float),
        s_beta,
        bbar,
        opts.refine_tol,
        opts.refine_stall_tol,
        int(opts.refine_max_iter),
        opts.armijo_c,
        opts.armijo_shrink,
        opts.min_step_scale,
    )
    stop = _STOP_NAMES[int(stop)]
    return FitResult(
        params=FactorParams(beta, alpha, gamma),
        loglik=float(trace[-1]),
        loglik_trace=trace,
        grad_norms={"beta": float(gsup[0]), "alpha": float(gsup[1]), "gamma": float(gsup[2])},
        converged=stop != "max_iter",
        iterations=int(it),
        family=family,
        stop_reason=stop,
    )


def fit(
    data: PanelData,
    family,
    d_f: int,
    options: EstimatorOptions | None = None,
    warm_start: FactorParams | None = None,
) -> FitResult:
    """Two-step estimate of (beta, alpha, gamma) with `d_f` factors.

    The pipeline is: additive two-way fit, penalty selection, nuclear-norm
    penalized fit at the selected penalty, SVD factor extraction, gradient
    refinement. With `warm_start` the first four steps are skipped and the
    refinement starts from the given parameters. A warm-started result that
    predicts every cell with certainty is returned with ``converged=False``
    and ``stop_reason="separated"``.
    """
    opts = options or EstimatorOptions()
    family = Family.parse(family)
    n, t = data.shape
    if d_f < 0 or d_f > min(n, t):
        raise DimensionMismatch(f"d_f={d_f} must lie in [0, {min(n, t)}]")
    if warm_start is not None:
        if warm_start.d_f != d_f:
            raise DimensionMismatch("warm start has the wrong number of factors")
        return _flag_separation(data, family, refine(data, family, warm_start, opts))

    tw = twoway_init(data, family, tol=opts.twoway_tol, max_iter=opts.twoway_max_iter)
    phi_tilde, phi_hat, _ = tuning_select(data, family, tw.beta, tw.sigma, d_f=d_f, options=opts)
    nuc = fit_nuclear(data, family, phi_hat, init=(tw.beta, tw.sigma), options=opts)
    nuc = replace(nuc, tuning_initial=phi_tilde, tuning_final=phi_hat)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        alpha, gamma = extract_factors(nuc.sigma_nuc, d_f, fill_null=True)
    res = refine(data, family, FactorParams(nuc.beta_nuc, alpha, gamma), opts)
    return replace(res, nuc=nuc, tuning=(phi_tilde, phi_hat))


def _flag_separation(data, family, res):
    # a vanishing gradient at an unbounded index is not a maximizer
    z = index(data, res.params)
    if np.all(np.abs(family.score(data.y, z)) < 1e-6):
        return replace(res, converged=False, stop_reason="separated")
    return res


# -- number of factors -----------------------------------------------------------


@dataclass(frozen=True)
class FactorSelection:
    singular_values: np.ndarray
    ratios: np.ndarray
    chosen: int
    threshold: float
    below_threshold: bool
    floor: float = 0.0
    note: str = (
        "stand-in rules: zero factors when sigma_1 < c0 * sqrt(max(N, T)); "
        "denominators floored at the penalty level"
    )


def eigenvalue_ratio(singular_values, r_max: int, threshold: float = 0.0, floor: float = 0.0) -> FactorSelection:
    """Pick the rank maximizing ``s_r / max(s_{r+1}, floor)`` over ``1 <= r <= r_max``.

    Zero factors are chosen when the leading singular value falls below
    `threshold`. Ratios with a zero denominator are reported as ``inf``.
    """
    s = np.sort(np.asarray(singular_values, dtype=float))[::-1]
    if r_max < 1 or r_max >= s.size + 1:
        raise ValueError(f"r_max={r_max} needs at least r_max + 1 singular values")
    num, den = s[:r_max], np.maximum(s[1 : r_max + 1], floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, np.nan))
    below = not (s[0] >= threshold and s[0] > 0)
    if below:
        chosen = 0
    else:
        chosen = int(np.nanargmax(np.where(np.isnan(ratios), -np.inf, ratios))) + 1
    return FactorSelection(s, ratios, chosen, float(threshold), below, float(floor))


def select_num_factors(data: PanelData, family, r_max: int | None = None, options: EstimatorOptions | None = None) -> FactorSelection:
    """Eigenvalue-ratio choice of d_f from the nuclear-norm penalized effect matrix.

    Soft-thresholding sets the trailing singular values of the penalized
    estimate to exactly zero, so the plain ratio would always point at the
    last nonzero one. Denominators are therefore floored at the penalty
    level, below which a singular value carries no signal.
    """
    opts = options or EstimatorOptions()
    family = Family.parse(family)
    n, t = data.shape
    r_max = opts.r_max if r_max is None else r_max
    r_max = min(r_max, min(n, t) - 1)
    if r_max < 1:
        raise ValueError("panel too small for factor selection")
    tw = twoway_init(data, family, tol=opts.twoway_tol, max_iter=opts.twoway_max_iter)
    # the interim truncation rank only affects the updated penalty; use r_max
    _, phi_hat, _ = tuning_select(data, family, tw.beta, tw.sigma, d_f=r_max, options=opts)
    nuc = fit_nuclear(data, family, phi_hat, init=(tw.beta, tw.sigma), options=opts)
    sv = np.linalg.svd(nuc.sigma_nuc, compute_uv=False)
    return eigenvalue_ratio(sv, r_max, opts.zero_factor_c0 * np.sqrt(max(n, t)), floor=phi_hat)
