"""Analytical and split-panel jackknife corrections of the incidental-parameter bias."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import IfebootError, SingularBlock, SingularW, SubfitFailure
from .estimator import EstimatorOptions, FitResult, fit
from .likelihood import Family, expected_derivs, index
from .panel import PanelData

__all__ = [
    "OrthogonalizedRegressors",
    "AnalyticalCorrection",
    "orthogonalize",
    "projection_kernels",
    "analytical_correct",
    "split_panel_jackknife",
    "JackknifeResult",
]

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class OrthogonalizedRegressors:
    """Covariates residualized against the span of the fitted factors and loadings.

    Attributes
    ----------
    xtilde : ndarray (K, N, T)
        ``X - xi``.
    xi : ndarray (K, N, T)
        Weighted projection ``a_k gamma' + alpha g_k'`` of each covariate.
    weights : ndarray (N, T)
        Curvature weights used in the projection.
    als_iterations : list of int
    als_residual : float
        Largest violation of the weighted orthogonality conditions, relative
        to the weighted norm of the covariate.
    """

    xtilde: np.ndarray
    xi: np.ndarray
    weights: np.ndarray
    als_iterations: list
    als_residual: float


@dataclass(frozen=True)
class AnalyticalCorrection:
    w_hat: np.ndarray
    b_hat: np.ndarray
    beta_corrected: np.ndarray
    se: np.ndarray


def _block_solve(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Solve a stack of small symmetric systems ``gram[j] x_j = rhs[j]``."""
    if gram.shape[-1] == 0:
        return np.zeros_like(rhs)
    cond = np.linalg.cond(gram)
    bad = ~(cond < _COND_LIMIT)
    if bad.any():
        raise SingularBlock(f"weighted Gram matrix for {what} {int(np.flatnonzero(bad)[0])} is singular (cond={cond[bad][0]:.3g})")
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def orthogonality_residual(target, xi, w, alpha, gamma) -> float:
    """Largest weighted orthogonality violation of ``target - xi``, relative to ``||target||_w``."""
    r = w * (target - xi)
    scale = np.sqrt(np.sum(w * target * target)) + 1e-300
    v1 = np.abs(r @ gamma).max(initial=0.0)
    v2 = np.abs(r.T @ alpha).max(initial=0.0)
    return float(max(v1, v2) / scale)


def _als_one(target, w, alpha, gamma, tol, resid_tol, max_iter):
    n, t = target.shape
    d = alpha.shape[1]
    if d == 0:
        return np.zeros_like(target), 0
    gram_a = np.einsum("it,tr,ts->irs", w, gamma, gamma)
    gram_g = np.einsum("it,ir,is->trs", w, alpha, alpha)
    a = np.zeros((n, d))
    g = np.zeros((t, d))
    prev = np.sum(w * target * target)
    it = 0
    for it in range(1, max_iter + 1):
        r = target - alpha @ g.T
        a = _block_solve(gram_a, (w * r) @ gamma, "unit")
        r = target - a @ gamma.T
        g = _block_solve(gram_g, (w * r).T @ alpha, "period")
        xi = a @ gamma.T + alpha @ g.T
        obj = np.sum(w * (target - xi) ** 2)
        if prev - obj <= tol * max(prev, 1e-300) and orthogonality_residual(target, xi, w, alpha, gamma) <= resid_tol:
            break
        prev = obj
    return xi, it


def orthogonalize(
    data: PanelData,
    fit_result: FitResult,
    family=None,
    tol: float = 1e-10,
    resid_tol: float = 1e-12,
    max_iter: int = 10000,
) -> OrthogonalizedRegressors:
    """Weighted projection of each covariate on ``{a gamma_hat' + alpha_hat g'}``.

    Weights are the model-implied curvatures ``-E[d2 l]`` at the fitted
    index. For each covariate the weighted least-squares problem is solved by
    alternating between the unit coefficients ``a_i`` and the period
    coefficients ``g_t`` until the relative decrease of the objective falls
    below `tol` and the weighted orthogonality residual below `resid_tol`.

    Raises
    ------
    SingularBlock
        When some unit or period has a (numerically) singular weighted Gram
        matrix, typically because all its fitted probabilities are 0 or 1.
    """
    family = Family.parse(family if family is not None else fit_result.family)
    p = fit_result.params
    z = index(data, p)
    e2, _, _ = expected_derivs(z, family)
    w = -e2
    xi = np.empty_like(data.x)
    iters = []
    resid = 0.0
    for k in range(data.n_covariates):
        xi[k], it = _als_one(data.x[k], w, p.alpha, p.gamma, tol, resid_tol, max_iter)
        iters.append(it)
        resid = max(resid, orthogonality_residual(data.x[k], xi[k], w, p.alpha, p.gamma))
    return OrthogonalizedRegressors(data.x - xi, xi, w, iters, resid)


def projection_kernels(e2: np.ndarray, alpha: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell spectral kernels of the first-order bias.

    Returns ``kg[i, t] = gamma_t' (sum_h gamma_h gamma_h' E d2 l_ih)^{-1} gamma_t``
    and ``ka[i, t] = alpha_i' (sum_h alpha_h alpha_h' E d2 l_ht)^{-1} alpha_i``.
    Both are non-positive.
    """
    n, d = alpha.shape
    t = gamma.shape[0]
    if d == 0:
        return np.zeros((n, t)), np.zeros((n, t))
    gram_a = np.einsum("ih,hr,hs->irs", e2, gamma, gamma)
    gram_g = np.einsum("ht,hr,hs->trs", e2, alpha, alpha)
    for what, gram in (("unit", gram_a), ("period", gram_g)):
        cond = np.linalg.cond(gram)
        if not (cond < _COND_LIMIT).all():
            raise SingularBlock(f"curvature-weighted Gram matrix for some {what} is singular")
    inv_a = np.linalg.inv(gram_a)
    inv_g = np.linalg.inv(gram_g)
    kg = np.einsum("tr,irs,ts->it", gamma, inv_a, gamma)
    ka = np.einsum("ir,trs,is->it", alpha, inv_g, alpha)
    return kg, ka


def analytical_correct(data: PanelData, fit_result: FitResult, family=None, orth: OrthogonalizedRegressors | None = None) -> AnalyticalCorrection:
    """Plug-in first-order bias correction.

    With ``w = -E[d2 l]``, ``W = (1/NT) sum_it w_it Xt_it Xt_it'`` and

        b = -(1/sqrt(NT)) sum_it (kg + ka)_it (E[d2 l d1 l]_it + E[d3 l]_it / 2) Xt_it,

    the corrected estimate is ``beta - W^{-1} b / sqrt(NT)`` and the standard
    errors are ``sqrt(diag(W^{-1}) / NT)``. All expectations are taken under
    the fitted model at the fitted index; for the logit the score-curvature
    term is identically zero.

    Raises
    ------
    SingularW
        If ``W`` is not positive definite.
    """
    family = Family.parse(family if family is not None else fit_result.family)
    p = fit_result.params
    if orth is None:
        orth = orthogonalize(data, fit_result, family)
    nt = data.y.size
    z = index(data, p)
    e2, e12, e3 = expected_derivs(z, family)
    xt = orth.xtilde
    w_hat = np.einsum("it,kit,lit->kl", -e2, xt, xt) / nt
    w_hat = 0.5 * (w_hat + w_hat.T)
    try:
        np.linalg.cholesky(w_hat)
    except np.linalg.LinAlgError:
        raise SingularW("information matrix of the orthogonalized covariates is not positive definite") from None
    if np.linalg.cond(w_hat) > _COND_LIMIT:
        raise SingularW("information matrix of the orthogonalized covariates is ill-conditioned")
    kg, ka = projection_kernels(e2, p.alpha, p.gamma)
    cell = (kg + ka) * (e12 + 0.5 * e3)
    b_hat = -np.tensordot(xt, cell, axes=([1, 2], [0, 1])) / np.sqrt(nt)
    w_inv = np.linalg.inv(w_hat)
    beta_a = p.beta - w_inv @ b_hat / np.sqrt(nt)
    se = np.sqrt(np.diag(w_inv) / nt)
    return AnalyticalCorrection(w_hat, b_hat, beta_a, se)


@dataclass(frozen=True)
class JackknifeResult:
    beta_corrected: np.ndarray
    beta_full: np.ndarray
    beta_time_halves: tuple
    beta_unit_halves: tuple
    dropped: tuple


def split_panel_jackknife(
    data: PanelData,
    family,
    d_f: int,
    options: EstimatorOptions | None = None,
    full_fit: FitResult | None = None,
) -> JackknifeResult:
    """Split-panel jackknife ``3 b - (b_T1 + b_T2)/2 - (b_N1 + b_N2)/2``.

    ``b_T1, b_T2`` are estimates on the first and second half of the periods,
    ``b_N1, b_N2`` on the first and second half of the units; each half is
    refit with the full two-step pipeline at the same number of factors. An
    odd dimension drops its last unit or period (with a warning) before
    splitting.

    Raises
    ------
    SubfitFailure
        Naming the half whose fit raised or did not converge.
    """
    family = Family.parse(family)
    n, t = data.shape
    dropped = []
    if n % 2:
        warnings.warn("odd number of units; dropping the last one for the split", stacklevel=2)
        dropped.append(("unit", data.unit_ids[-1]))
    if t % 2:
        warnings.warn("odd number of periods; dropping the last one for the split", stacklevel=2)
        dropped.append(("period", data.period_ids[-1]))
    n2, t2 = n - n % 2, t - t % 2
    if full_fit is None:
        full_fit = fit(data, family, d_f, options)
    if not full_fit.converged:
        raise SubfitFailure("full panel", RuntimeError("full-sample fit did not converge"))
    work = data.subpanel(slice(0, n2), slice(0, t2)) if dropped else data
    halves = {
        "first half of periods": work.subpanel(periods=slice(0, t2 // 2)),
        "second half of periods": work.subpanel(periods=slice(t2 // 2, t2)),
        "first half of units": work.subpanel(units=slice(0, n2 // 2)),
        "second half of units": work.subpanel(units=slice(n2 // 2, n2)),
    }
    est = {}
    for name, sub in halves.items():
        try:
            r = fit(sub, family, d_f, options)
        except (IfebootError, np.linalg.LinAlgError) as exc:
            raise SubfitFailure(name, exc) from exc
        if not r.converged:
            raise SubfitFailure(name, RuntimeError("refinement did not converge"))
        est[name] = r.beta
    bt = (est["first half of periods"], est["second half of periods"])
    bn = (est["first half of units"], est["second half of units"])
    b = full_fit.beta
    corrected = 3.0 * b - 0.5 * (bt[0] + bt[1]) - 0.5 * (bn[0] + bn[1])
    return JackknifeResult(corrected, b, bt, bn, tuple(dropped))
