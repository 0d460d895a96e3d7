"""Binary-choice likelihoods with an interactive index.

The index of cell (i, t) is ``Z_it = X_it' beta + alpha_i' gamma_t`` and the
per-cell log-likelihood is ``l_it(z) = log F(z)`` if ``Y_it = 1`` and
``log(1 - F(z))`` otherwise. All derivatives are taken with respect to z.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DimensionMismatch, NonFiniteIndex
from .panel import PanelData

__all__ = [
    "Family",
    "FactorParams",
    "DerivBundle",
    "index",
    "loglik",
    "derivs",
    "expected_derivs",
    "score_blocks",
    "score_and_hessian_blocks",
]

_SQRT_HALF_PI = np.sqrt(np.pi / 2.0)
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
# Beyond this |u| the Mills-ratio remainder comes from its asymptotic series.
_PROBIT_SERIES_CUTOFF = 8.0
# Below this u the probit derivatives are evaluated through 1 - x R(x).
_PROBIT_TAIL_SWITCH = -2.0
_SERIES_TERMS = 32


def _odd_double_factorials(n):
    out = np.empty(n)
    acc = 1.0
    for k in range(1, n + 1):
        acc *= 2 * k - 1
        out[k - 1] = acc
    return out


_DFACT = _odd_double_factorials(_SERIES_TERMS + 1)


def _mills_remainder(x):
    """Return ``e = 1 - x R(x)`` and ``x^2 e - 1`` for x > 0, R the Mills ratio.

    For moderate x the scaled complementary error function gives R(x)
    directly. For large x both quantities are summed from the asymptotic
    expansion ``x R(x) ~ 1 - 1/x^2 + 3/x^4 - 15/x^6 + ...``, which avoids the
    cancellation in ``1 - x R(x)``.
    """
    x = np.asarray(x, dtype=float)
    e = np.empty_like(x)
    x2e_m1 = np.empty_like(x)
    small = x <= _PROBIT_SERIES_CUTOFF
    if small.any():
        xs = x[small]
        es = 1.0 - xs * _SQRT_HALF_PI * special.erfcx(xs * _INV_SQRT2)
        e[small] = es
        x2e_m1[small] = xs * xs * es - 1.0
    big = ~small
    if big.any():
        inv = 1.0 / (x[big] ** 2)
        k = np.arange(1, _SERIES_TERMS + 1)
        signs = np.where(k % 2 == 1, 1.0, -1.0)
        powers = inv[:, None] ** k[None, :]
        terms = signs * _DFACT[:_SERIES_TERMS] * powers
        e[big] = terms.sum(axis=1)
        # x^2 e - 1 drops the leading 1/x^2 term and shifts powers by one
        x2e_m1[big] = (terms[:, 1:] / inv[:, None]).sum(axis=1)
    return e, x2e_m1


def _probit_parts(u):
    """log Phi(u), lambda(u), lambda'(u), lambda''(u) with lambda = phi/Phi."""
    u = np.asarray(u, dtype=float)
    logcdf = special.log_ndtr(u)
    lam = np.empty_like(u)
    d1 = np.empty_like(u)
    d2 = np.empty_like(u)

    pos = u >= _PROBIT_TAIL_SWITCH
    if pos.any():
        up = u[pos]
        lp = np.exp(-0.5 * up * up - 0.5 * np.log(2 * np.pi) - logcdf[pos])
        lam[pos] = lp
        d1[pos] = -lp * (up + lp)
        d2[pos] = lp * ((up + lp) * (up + 2 * lp) - 1.0)

    neg = ~pos
    if neg.any():
        x = -u[neg]
        e, x2e_m1 = _mills_remainder(x)
        w = 1.0 - e
        lam[neg] = x / w
        d1[neg] = -(x * x) * e / (w * w)
        d2[neg] = x * ((x * x) * e * e + x2e_m1 + 2.0 * e - e * e) / w**3
    return logcdf, lam, d1, d2


class Family(enum.Enum):
    """Binary-choice link: logistic or standard normal errors."""

    LOGIT = "logit"
    PROBIT = "probit"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown family {value!r}; expected 'logit' or 'probit'") from None

    @property
    def curvature_bound(self) -> float:
        """Upper bound on ``-d2 l / dz2`` over the real line."""
        return 0.25 if self is Family.LOGIT else 1.0

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        if self is Family.LOGIT:
            return special.expit(z)
        return special.ndtr(z)

    def pdf(self, z):
        """Derivative of the cdf."""
        z = np.asarray(z, dtype=float)
        if self is Family.LOGIT:
            f = special.expit(z)
            return f * special.expit(-z)
        return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

    def logpmf(self, y, z):
        """Per-cell log-likelihood ``l(z)`` for outcome y."""
        q = 2.0 * np.asarray(y, dtype=float) - 1.0
        u = q * np.asarray(z, dtype=float)
        if self is Family.LOGIT:
            return -np.logaddexp(0.0, -u)
        return special.log_ndtr(u)

    def score(self, y, z):
        """First derivative ``dl/dz`` only (cheaper than :meth:`cell_derivs`)."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self is Family.LOGIT:
            return y * special.expit(-z) - (1.0 - y) * special.expit(z)
        q = 2.0 * y - 1.0
        u = q * z
        lam = np.exp(-0.5 * u * u - 0.5 * np.log(2 * np.pi) - special.log_ndtr(u))
        big = u < -_PROBIT_SERIES_CUTOFF
        if big.any():
            lam[big] = _probit_parts(u[big])[1]
        return q * lam

    def cell_derivs(self, y, z):
        """First three derivatives of ``l(z)``, elementwise."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self is Family.LOGIT:
            f = special.expit(z)
            g = special.expit(-z)
            w = f * g
            return y * g - (1.0 - y) * f, -w, -w * (g - f)
        q = 2.0 * y - 1.0
        _, lam, d1, d2 = _probit_parts(q * z)
        return q * lam, d1, q * d2


@dataclass(frozen=True)
class DerivBundle:
    """Per-cell derivatives of the log-likelihood at the current index."""

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray


@dataclass(frozen=True)
class FactorParams:
    """Common parameters, loadings (N x d_f) and factors (T x d_f)."""

    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        a = np.asarray(self.alpha, dtype=float)
        g = np.asarray(self.gamma, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if g.ndim == 1:
            g = g[:, None]
        if a.ndim != 2 or g.ndim != 2 or a.shape[1] != g.shape[1]:
            raise DimensionMismatch(f"alpha {a.shape} and gamma {g.shape} must share the factor dimension")
        if not (np.isfinite(b).all() and np.isfinite(a).all() and np.isfinite(g).all()):
            raise NonFiniteIndex("parameters must be finite")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "gamma", g)

    @property
    def d_f(self) -> int:
        return self.alpha.shape[1]

    @property
    def interactive(self) -> np.ndarray:
        """The N x T matrix ``alpha gamma'``."""
        return self.alpha @ self.gamma.T

    def rotate(self, a: np.ndarray) -> "FactorParams":
        """Apply ``alpha -> alpha A``, ``gamma -> gamma A^{-T}``; leaves the index unchanged."""
        a = np.asarray(a, dtype=float)
        return FactorParams(self.beta, self.alpha @ a, self.gamma @ np.linalg.inv(a).T)

    @classmethod
    def zeros(cls, k: int, n: int, t: int, d_f: int) -> "FactorParams":
        return cls(np.zeros(k), np.zeros((n, d_f)), np.zeros((t, d_f)))


def _check_dims(data: PanelData, params: FactorParams):
    n, t = data.shape
    if params.beta.shape[0] != data.n_covariates:
        raise DimensionMismatch(f"beta has {params.beta.shape[0]} entries, panel has {data.n_covariates} covariates")
    if params.alpha.shape[0] != n or params.gamma.shape[0] != t:
        raise DimensionMismatch(f"alpha {params.alpha.shape} / gamma {params.gamma.shape} do not match panel {n}x{t}")


def xb(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``sum_k beta_k X_k`` for x of shape (K, N, T)."""
    return np.tensordot(beta, x, axes=(0, 0)) if x.shape[0] else np.zeros(x.shape[1:])


def index(data: PanelData, params: FactorParams) -> np.ndarray:
    """Linear index ``Z_it = X_it' beta + alpha_i' gamma_t`` as an N x T matrix."""
    _check_dims(data, params)
    return xb(data.x, params.beta) + params.alpha @ params.gamma.T


def _finite_index(data, params):
    z = index(data, params)
    if not np.isfinite(z).all():
        raise NonFiniteIndex("index has non-finite entries")
    return z


def loglik(data: PanelData, params: FactorParams, family) -> float:
    """Sum of per-cell log-likelihoods."""
    family = Family.parse(family)
    z = _finite_index(data, params)
    return float(family.logpmf(data.y, z).sum())


def derivs(data: PanelData, params: FactorParams, family) -> DerivBundle:
    family = Family.parse(family)
    z = _finite_index(data, params)
    return DerivBundle(*family.cell_derivs(data.y, z))


def expected_derivs(z: np.ndarray, family) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Model expectations at index z of ``d2 l``, ``d1 l * d2 l`` and ``d3 l``.

    The expectation is over ``Y ~ Bernoulli(F(z))``. For the logit the second
    and third derivatives do not depend on Y, so the middle term is zero.
    """
    family = Family.parse(family)
    z = np.asarray(z, dtype=float)
    p = family.cdf(z)
    a1, a2, a3 = family.cell_derivs(np.ones_like(z), z)
    b1, b2, b3 = family.cell_derivs(np.zeros_like(z), z)
    e2 = p * a2 + (1 - p) * b2
    e12 = p * a1 * a2 + (1 - p) * b1 * b2
    e3 = p * a3 + (1 - p) * b3
    if family is Family.LOGIT:
        e12 = np.zeros_like(z)
    return e2, e12, e3


def score_blocks(x: np.ndarray, d1: np.ndarray, alpha: np.ndarray, gamma: np.ndarray):
    """Chain-rule gradients from the per-cell score matrix ``d1``."""
    gb = np.tensordot(x, d1, axes=([1, 2], [0, 1])) if x.shape[0] else np.zeros(0)
    return gb, d1 @ gamma, d1.T @ alpha


def score_and_hessian_blocks(data: PanelData, params: FactorParams, family):
    """Gradients of the log-likelihood in the beta, alpha and gamma blocks.

    Returns
    -------
    grad_beta : ndarray (K,)
    grad_alpha : ndarray (N, d_f)
    grad_gamma : ndarray (T, d_f)
    """
    family = Family.parse(family)
    z = _finite_index(data, params)
    d1 = family.score(data.y, z)
    return score_blocks(data.x, d1, params.alpha, params.gamma)
