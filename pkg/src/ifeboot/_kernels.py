"""Compiled inner loops.

The gradient refinement runs thousands of cheap iterations on small arrays,
where numpy call overhead dominates. These kernels fuse one iteration into
plain loops. They mirror the vectorized code in :mod:`ifeboot.likelihood`,
which stays the reference implementation.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOGIT = 0
PROBIT = 1

STOP_GRADIENT = 0
STOP_OBJECTIVE = 1
STOP_MAX_ITER = 2

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@njit(cache=True)
def log_ndtr(u):
    if u > 0.0:
        return math.log1p(-0.5 * math.erfc(u * _INV_SQRT2))
    if u > -37.0:
        return math.log(0.5 * math.erfc(-u * _INV_SQRT2))
    # asymptotic expansion of the Mills ratio
    r = 1.0 / (u * u)
    s = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)))
    return -0.5 * u * u - math.log(-u) - _LOG_SQRT_2PI + math.log(s)


@njit(cache=True)
def cell_logpmf(fam, y, z):
    u = z if y > 0.5 else -z
    if fam == LOGIT:
        if u > 0.0:
            return -math.log1p(math.exp(-u))
        return u - math.log1p(math.exp(u))
    return log_ndtr(u)


@njit(cache=True)
def _expit(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def cell_score(fam, y, z):
    if fam == LOGIT:
        return y * _expit(-z) - (1.0 - y) * _expit(z)
    q = 1.0 if y > 0.5 else -1.0
    u = q * z
    lam = math.exp(-0.5 * u * u - _LOG_SQRT_2PI - log_ndtr(u))
    return q * lam


@njit(cache=True)
def _loglik(fam, x, y, beta, alpha, gamma, z):
    """Fill z with the index and return the log-likelihood."""
    k_, n, t = x.shape
    d = alpha.shape[1]
    total = 0.0
    for i in range(n):
        for s in range(t):
            v = 0.0
            for k in range(k_):
                v += beta[k] * x[k, i, s]
            for r in range(d):
                v += alpha[i, r] * gamma[s, r]
            z[i, s] = v
            total += cell_logpmf(fam, y[i, s], v)
    return total


@njit(cache=True)
def _gradients(fam, x, y, alpha, gamma, z, gb, ga, gg):
    k_, n, t = x.shape
    d = alpha.shape[1]
    gb[:] = 0.0
    ga[:] = 0.0
    gg[:] = 0.0
    for i in range(n):
        for s in range(t):
            d1 = cell_score(fam, y[i, s], z[i, s])
            for k in range(k_):
                gb[k] += d1 * x[k, i, s]
            for r in range(d):
                ga[i, r] += d1 * gamma[s, r]
                gg[s, r] += d1 * alpha[i, r]


@njit(cache=True)
def _supnorm(a):
    m = 0.0
    for v in a.flat:
        av = abs(v)
        if av > m:
            m = av
    return m


@njit(cache=True)
def gradient_refine(
    fam, x, y, beta0, alpha0, gamma0, s_beta, bbar, tol, stall_tol, max_iter, armijo_c, shrink, min_step
):
    """Gradient ascent with curvature-bound block steps and Armijo backtracking.

    Returns ``(beta, alpha, gamma, trace, n_iter, stop_code, grad_sup)``.
    """
    k_, n, t = x.shape
    d = alpha0.shape[1]
    beta = beta0.copy()
    alpha = alpha0.copy()
    gamma = gamma0.copy()
    nb = np.empty_like(beta)
    na = np.empty_like(alpha)
    ng = np.empty_like(gamma)
    z = np.empty((n, t))
    zn = np.empty((n, t))
    gb = np.empty(k_)
    ga = np.empty((n, d))
    gg = np.empty((t, d))
    trace = np.empty(max_iter + 1)

    ll = _loglik(fam, x, y, beta, alpha, gamma, z)
    trace[0] = ll
    ntr = 1
    stop = STOP_MAX_ITER
    it = 0
    while True:
        _gradients(fam, x, y, alpha, gamma, z, gb, ga, gg)
        gmax = max(_supnorm(gb), max(_supnorm(ga), _supnorm(gg)))
        if gmax <= tol * (1.0 + abs(ll)):
            stop = STOP_GRADIENT
            break
        if it == max_iter:
            break
        s_eff = 0.0
        if d > 0:
            lam = max(np.linalg.eigvalsh(gamma.T @ gamma)[-1], np.linalg.eigvalsh(alpha.T @ alpha)[-1])
            s_eff = 1.0 / (bbar * lam) if lam > 0.0 else 1.0 / bbar
        slope = s_beta * np.sum(gb * gb) + s_eff * (np.sum(ga * ga) + np.sum(gg * gg))
        step = 1.0
        ll_new = -np.inf
        while True:
            for k in range(k_):
                nb[k] = beta[k] + step * s_beta * gb[k]
            for i in range(n):
                for r in range(d):
                    na[i, r] = alpha[i, r] + step * s_eff * ga[i, r]
            for s in range(t):
                for r in range(d):
                    ng[s, r] = gamma[s, r] + step * s_eff * gg[s, r]
            ll_new = _loglik(fam, x, y, nb, na, ng, zn)
            if ll_new >= ll + armijo_c * step * slope:
                break
            step *= shrink
            if step < min_step:
                break
        if not ll_new > ll:
            stop = STOP_OBJECTIVE
            break
        gain = (ll_new - ll) / (1.0 + abs(ll_new))
        beta[:] = nb
        alpha[:, :] = na
        gamma[:, :] = ng
        z[:, :] = zn
        ll = ll_new
        trace[ntr] = ll
        ntr += 1
        it += 1
        if gain <= stall_tol:
            _gradients(fam, x, y, alpha, gamma, z, gb, ga, gg)
            stop = STOP_OBJECTIVE
            break
    grad_sup = np.array([_supnorm(gb), _supnorm(ga), _supnorm(gg)])
    return beta, alpha, gamma, trace[:ntr], it, stop, grad_sup
