import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifeboot.errors import Nonconvergence
from ifeboot.estimator import (
    EstimatorOptions,
    RankDeficientWarning,
    _score_matrix,
    eigenvalue_ratio,
    extract_factors,
    fit,
    fit_nuclear,
    nuclear_objective,
    op_norm,
    plain_ml,
    refine,
    select_num_factors,
    svt,
    tuning_select,
    twoway_init,
)
from ifeboot.likelihood import FactorParams, Family, loglik
from ifeboot.panel import PanelData
from ifeboot.simlab import ScenarioSpec, generate

from .conftest import random_panel


def _s1(rep, n=30, t=20, family="logit", seed=5):
    return generate(ScenarioSpec(N=n, T=t, family=family, seed=seed), rep)


# -- two-way initialization ---------------------------------------------------------------


def test_twoway_without_effects_close_to_plain_logit(rng):
    n, t = 30, 20
    x = rng.standard_normal((1, n, t))
    y = (rng.logistic(size=(n, t)) < 0).astype(float)
    d = PanelData(y, x)
    b_plain = plain_ml(d, "logit")
    p = 1 / (1 + np.exp(-b_plain[0] * x[0]))
    se = 1 / np.sqrt(np.sum(p * (1 - p) * x[0] ** 2))
    tw = twoway_init(d, "logit")
    assert abs(tw.beta[0]) <= 3 * se


def test_twoway_separated_panel_raises():
    y = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    x = np.array([[[1.0, 2.0, -1.0], [2.0, 1.0, -2.0]]])
    with pytest.raises(Nonconvergence):
        twoway_init(PanelData(y, x), "logit")


def test_twoway_period_effects_sum_to_zero():
    d, _ = _s1(0)
    tw = twoway_init(d, "logit")
    assert abs(tw.period_effects.sum()) < 1e-12
    np.testing.assert_allclose(tw.sigma, tw.unit_effects[:, None] + tw.period_effects[None, :])


# -- penalty selection --------------------------------------------------------------------


def test_op_norm_single_entry():
    g = np.zeros((5, 4))
    g[2, 1] = -3.0
    assert op_norm(g) == 3.0
    assert EstimatorOptions().phi_init_scale * op_norm(g) == 1.5


def test_phi_tilde_constant_score():
    n, t = 6, 5
    d = PanelData(np.ones((n, t)), np.random.default_rng(0).standard_normal((1, n, t)))
    g = _score_matrix(d, Family.LOGIT, np.zeros(1), np.zeros((n, t)))
    assert np.allclose(g, 0.5)
    assert op_norm(g) == pytest.approx(0.5 * np.sqrt(n * t), rel=1e-14)
    phi_tilde, _, _ = tuning_select(d, "logit", np.zeros(1), np.zeros((n, t)))
    assert phi_tilde == pytest.approx(0.25 * np.sqrt(n * t), rel=1e-14)


def test_op_norm_power_iteration(rng):
    g = rng.standard_normal((6, 5))
    v = rng.standard_normal(5)
    for _ in range(2000):
        v = g.T @ (g @ v)
        v /= np.linalg.norm(v)
    assert op_norm(g) == pytest.approx(np.linalg.norm(g @ v), rel=1e-8)


# -- nuclear-norm stage -------------------------------------------------------------------


def test_svt_closed_form():
    np.testing.assert_allclose(svt(np.diag([3.0, 1.0]), 1.0), np.diag([2.0, 0.0]), atol=1e-15)


def test_large_penalty_kills_sigma(rng):
    d, _, _ = random_panel(rng, 8, 7)
    b0 = plain_ml(d, "logit")
    g = _score_matrix(d, Family.LOGIT, b0, np.zeros(d.shape))
    res = fit_nuclear(d, "logit", 1.01 * op_norm(g))
    assert np.abs(res.sigma_nuc).max() < 1e-12
    assert res.beta_nuc == pytest.approx(b0, abs=1e-6)


def _ista(x, y, phi, iters):
    # plain proximal gradient with a fixed step, written independently
    lip = 0.25 * (1 + np.sum(x * x))
    h = 1 / lip
    b, s = 0.0, np.zeros_like(y)
    for _ in range(iters):
        r = y - 1 / (1 + np.exp(-(b * x + s)))
        b += h * np.sum(r * x)
        u, sv, vt = np.linalg.svd(s + h * r)
        s = (u * np.maximum(sv - h * phi, 0)) @ vt
    return b, s


def test_nuclear_matches_ista_oracle(rng):
    x = rng.standard_normal((4, 4))
    y = (0.5 * x + np.outer(rng.standard_normal(4), rng.standard_normal(4)) - rng.logistic(size=(4, 4)) > 0).astype(float)
    d = PanelData(y, x[None])
    phi = 0.45
    b, s = _ista(x, y, phi, 30000)
    res = fit_nuclear(d, "logit", phi)
    nt = d.y.size
    assert abs(nuclear_objective(d, "logit", [b], s, phi) - nuclear_objective(d, "logit", res.beta_nuc, res.sigma_nuc, phi)) * nt < 1e-6


@pytest.mark.parametrize("family", ["logit", "probit"])
def test_nuclear_trace_monotone_and_residual(family):
    d, _ = _s1(1, family=family)
    tw = twoway_init(d, family)
    _, phi, _ = tuning_select(d, family, tw.beta, tw.sigma, d_f=2)
    res = fit_nuclear(d, family, phi, init=(tw.beta, tw.sigma))
    assert res.converged
    assert np.all(np.diff(res.objective_trace) >= -1e-10)
    assert res.prox_residual <= EstimatorOptions().nuc_prox_tol


# -- factor extraction --------------------------------------------------------------------


def test_extract_rank_one(rng):
    s = np.outer(rng.standard_normal(5), rng.standard_normal(4))
    a, g = extract_factors(s, 1)
    assert np.abs(a @ g.T - s).max() < 1e-10


def test_extract_zero():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        a, g = extract_factors(np.zeros((4, 3)), 2)
    assert not a.any() and not g.any()


def test_extract_residual_is_third_singular_value(rng):
    s = rng.standard_normal((7, 3)) @ rng.standard_normal((3, 6))
    a, g = extract_factors(s, 2)
    sv = np.linalg.svd(s, compute_uv=False)
    assert np.linalg.norm(s - a @ g.T) == pytest.approx(sv[2], rel=1e-10)


@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 4))
def test_extract_is_projection(seed, r):
    m = np.random.default_rng(seed).standard_normal((6, 5))
    a, g = extract_factors(m, r)
    a2, g2 = extract_factors(a @ g.T, r)
    assert np.abs(a2 @ g2.T - a @ g.T).max() < 1e-10


def test_extract_balanced_split(rng):
    s = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    a, g = extract_factors(s, 2)
    np.testing.assert_allclose(np.linalg.norm(a, axis=0), np.linalg.norm(g, axis=0), rtol=1e-10)


# -- refinement ---------------------------------------------------------------------------


def test_refine_fixed_point(rng):
    x = rng.standard_normal((1, 10, 8))
    d = PanelData((rng.random((10, 8)) < 0.5).astype(float), x)
    b = plain_ml(d, "logit")
    init = FactorParams(b, np.zeros((10, 0)), np.zeros((8, 0)))
    res = refine(d, "logit", init)
    assert res.iterations == 0 and res.stop_reason == "gradient"
    assert np.array_equal(res.beta, b)


@pytest.mark.parametrize("family", ["logit", "probit"])
def test_zero_factors_match_plain_ml(family, rng):
    d, _, _ = random_panel(rng, 12, 10, k=2, family=family)
    res = fit(d, family, 0)
    assert np.abs(res.beta - plain_ml(d, family)).max() < 1e-6


@pytest.mark.parametrize("family", ["logit", "probit"])
@pytest.mark.parametrize("method", ["gradient", "newton"])
def test_refine_trace_monotone(family, method):
    d, _ = _s1(2, family=family)
    res = fit(d, family, 2, EstimatorOptions(refine_method=method))
    assert res.converged
    assert np.all(np.diff(res.loglik_trace) >= 0)
    assert res.loglik == pytest.approx(loglik(d, res.params, family), rel=1e-12)


def test_gradient_kernel_matches_numpy_likelihood():
    d, _ = _s1(3, family="probit")
    res = fit(d, "probit", 2)
    assert res.loglik == pytest.approx(loglik(d, res.params, "probit"), rel=1e-12)


def test_s1_fit_converges():
    d, _ = _s1(4)
    res = fit(d, "logit", 2)
    assert res.converged and res.d_f == 2
    assert res.tuning[0] < res.tuning[1]


def test_rotation_of_init_leaves_beta(rng):
    d, _ = _s1(5)
    res = fit(d, "logit", 2)
    start = res.nuc
    a, g = extract_factors(start.sigma_nuc, 2, fill_null=True)
    init = FactorParams(start.beta_nuc, a, g)
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    b0 = refine(d, "logit", init).beta
    b1 = refine(d, "logit", init.rotate(q)).beta
    assert np.abs(b0 - b1).max() < 1e-6


def test_fit_is_deterministic():
    d1, _ = _s1(6)
    d2, _ = _s1(6)
    r1, r2 = fit(d1, "logit", 2), fit(d2, "logit", 2)
    assert np.array_equal(r1.beta, r2.beta)
    assert np.array_equal(r1.params.alpha, r2.params.alpha)
    assert np.array_equal(r1.loglik_trace, r2.loglik_trace)


def test_fit_permutation_invariant(rng):
    d, _ = _s1(7)
    base = fit(d, "logit", 2).beta
    perm = d.permute(rng.permutation(d.n_units), rng.permutation(d.n_periods))
    assert np.abs(fit(perm, "logit", 2).beta - base).max() < 1e-6


def test_warm_start_skips_first_stage():
    d, _ = _s1(8)
    res = fit(d, "logit", 2)
    again = fit(d, "logit", 2, warm_start=res.params)
    assert again.nuc is None
    assert abs(again.beta[0] - res.beta[0]) < 1e-3


# -- number of factors --------------------------------------------------------------------


def test_eigenvalue_ratio_listed_values():
    sel = eigenvalue_ratio([10, 8, 0.5, 0.3], 3)
    np.testing.assert_allclose(sel.ratios, [1.25, 16.0, 0.5 / 0.3])
    assert sel.chosen == 2


def test_eigenvalue_ratio_zero_matrix():
    assert eigenvalue_ratio(np.zeros(5), 3, threshold=1.0).chosen == 0


def test_eigenvalue_ratio_floor():
    # trailing exact zeros from soft-thresholding must not win the argmax
    sel = eigenvalue_ratio([20.0, 8.0, 2.0, 0.0, 0.0], 4, floor=4.0)
    assert sel.chosen == 1 and np.isfinite(sel.ratios).all()


def test_select_factors_on_s1_draws():
    spec = ScenarioSpec(N=30, T=40, seed=3)
    hits = sum(select_num_factors(generate(spec, r)[0], "logit").chosen == 2 for r in range(100))
    assert hits >= 80, f"d_f=2 recovered in {hits}/100 draws"
