import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifeboot.bootstrap import (
    LAMBDA_GRID,
    Transform,
    apply_transform,
    bias_correct,
    ecdf,
    empirical_quantile,
    invert_transform,
    quantile_ci,
    replicate_rng,
    run_bootstrap,
    sample_dgp,
    sample_skewness,
    select_lambda,
    transformed_ci,
)
from ifeboot.errors import AllReplicatesFailed, DomainError, EmptyRun, InverseOutOfDomain, TooFewReplicates
from ifeboot.estimator import FitResult, fit
from ifeboot.likelihood import FactorParams, Family
from ifeboot.panel import PanelData
from ifeboot.simlab import ScenarioSpec, generate


def _manual_fit(params, family="logit"):
    return FitResult(params, 0.0, np.zeros(1), {}, True, 0, Family.parse(family))


# -- resampling --------------------------------------------------------------------------


def test_sample_dgp_certain_cells(rng):
    n, t = 4, 3
    d = PanelData(np.zeros((n, t)), rng.standard_normal((1, n, t)))
    fr = _manual_fit(FactorParams(np.zeros(1), np.full((n, 1), 1e3), np.ones((t, 1))))
    star = sample_dgp(d, fr, "logit", replicate_rng(0, 0))
    assert (star.y == 1).all()
    assert np.array_equal(star.x, d.x)


@pytest.mark.parametrize("family", ["logit", "probit"])
def test_sample_dgp_fair_coin(family):
    n, t = 400, 250
    d = PanelData(np.zeros((n, t)), np.zeros((1, n, t)))
    fr = _manual_fit(FactorParams.zeros(1, n, t, 1), family)
    star = sample_dgp(d, fr, family, replicate_rng(3, 0))
    assert abs(star.y.mean() - 0.5) <= 0.005


def test_sample_dgp_same_stream_same_draw(rng):
    d = PanelData(np.zeros((6, 5)), rng.standard_normal((1, 6, 5)))
    fr = _manual_fit(FactorParams(np.array([0.5]), np.zeros((6, 1)), np.zeros((5, 1))))
    a = sample_dgp(d, fr, "logit", replicate_rng(9, 4))
    b = sample_dgp(d, fr, "logit", replicate_rng(9, 4))
    c = sample_dgp(d, fr, "logit", replicate_rng(9, 5))
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


@pytest.fixture(scope="module")
def s1_fit():
    d, _ = generate(ScenarioSpec(N=30, T=20, seed=4), 0)
    return d, fit(d, "logit", 2)


def test_parallelism_gives_identical_replicates(s1_fit):
    d, fr = s1_fit
    one = run_bootstrap(d, fr, B=4, seed=17, jobs=1)
    two = run_bootstrap(d, fr, B=4, seed=17, jobs=2)
    assert np.array_equal(one.beta_reps, two.beta_reps)
    assert one.replicates == two.replicates and one.failures == two.failures
    assert one.seeds == ((17, 0), (17, 1), (17, 2), (17, 3))


def test_replicate_independent_of_b_count(s1_fit):
    # replicate b uses stream (seed, b) whatever the total number of replicates
    d, fr = s1_fit
    short = run_bootstrap(d, fr, B=2, seed=5)
    long = run_bootstrap(d, fr, B=3, seed=5)
    assert np.array_equal(short.beta_reps, long.beta_reps[:2])


def test_all_replicates_separate():
    n, t = 5, 4
    x = np.random.default_rng(0).standard_normal((1, n, t))
    fr = _manual_fit(FactorParams(np.zeros(1), np.full((n, 1), 1e3), np.ones((t, 1))))
    with pytest.raises(AllReplicatesFailed):
        run_bootstrap(PanelData(np.ones((n, t)), x), fr, B=3, seed=0)


def test_bootstrap_sd_matches_sampling_sd(s1_fit):
    # sampling SD of the estimator at this design is about 0.122
    d, fr = s1_fit
    run = run_bootstrap(d, fr, B=399, seed=1)
    sd = run.beta_reps[:, 0].std(ddof=1)
    assert 0.5 * 0.122 <= sd <= 1.5 * 0.122, sd
    assert run.b_effective + len(run.failures) == 399
    assert np.isfinite(run.beta_reps).all()


# -- bias correction ---------------------------------------------------------------------


def test_bias_correct_zero_bias():
    reps = np.full((7, 2), 0.3)
    np.testing.assert_array_equal(bias_correct(np.array([0.3, 0.3]), reps, "mean"), [0.3, 0.3])
    np.testing.assert_array_equal(bias_correct(np.array([0.3, 0.3]), reps, "median"), [0.3, 0.3])


def test_bias_correct_arithmetic():
    reps = np.array([[0.5], [0.7]])
    assert bias_correct(np.array([0.5]), reps, "mean")[0] == pytest.approx(0.4, abs=1e-15)


def test_bias_correct_median_componentwise():
    reps = np.array([[1.0, 10.0], [2.0, 30.0], [9.0, 20.0]])
    np.testing.assert_array_equal(bias_correct(np.array([2.0, 20.0]), reps, "median"), [2.0, 20.0])


def test_bias_correct_empty():
    with pytest.raises(EmptyRun):
        bias_correct(np.array([0.1]), np.empty((0, 1)))


@given(j=st.integers(-40, 40), seed=st.integers(0, 2**32 - 1))
def test_bias_correct_shift(j, seed):
    # dyadic values keep every sum exact, so the replicate mean is beta_hat + c
    c = j / 8
    v = np.random.default_rng(seed).choice([-1.0, 1.0], 10)
    v = np.concatenate([v, -v]) * 0.25
    reps = (0.5 + c + v)[:, None]
    assert reps.mean() == 0.5 + c
    assert bias_correct(np.array([0.5]), reps)[0] == 0.5 - c


# -- quantiles and intervals -------------------------------------------------------------


def test_quantile_ci_degenerate():
    ci = quantile_ci(np.array([0.4]), np.full((25, 1), 0.4))
    assert (ci.lower, ci.upper) == (0.4, 0.4)


def test_quantile_ci_three_points():
    ci = quantile_ci(np.array([0.0]), np.array([-1.0, 0.0, 1.0]), level=1.0, min_reps=1)
    assert (ci.lower, ci.upper) == (-1.0, 1.0)


def test_quantile_ci_nine_points():
    reps = np.round(np.arange(1, 10) / 10, 1)
    assert empirical_quantile(reps, 0.1) == 0.1
    assert empirical_quantile(reps, 0.9) == 0.9
    b = 0.45
    ci = quantile_ci(np.array([b]), reps, level=0.8, min_reps=9)
    assert (ci.lower, ci.upper) == (2 * b - 0.9, 2 * b - 0.1)


def test_quantile_ci_needs_twenty():
    with pytest.raises(TooFewReplicates):
        quantile_ci(np.array([0.0]), np.arange(19.0))


def test_inf_definition_no_interpolation():
    v = [3.0, 1.0, 2.0, 4.0]
    assert [empirical_quantile(v, a) for a in (0.0, 0.25, 0.26, 0.5, 0.75, 0.76, 1.0)] == [1, 1, 2, 2, 3, 4, 4]


@given(
    v=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40),
    u=st.floats(1e-9, 1.0),
    x=st.floats(-1e6, 1e6, allow_nan=False),
)
def test_galois_inequalities(v, u, x):
    assert ecdf(v, empirical_quantile(v, u)) >= u - 1e-12
    if ecdf(v, x) > 0:
        assert empirical_quantile(v, ecdf(v, x)) <= x


@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-100, 100))
def test_quantile_ci_length_shift_invariant(seed, c):
    reps = np.random.default_rng(seed).standard_normal(30)
    a = quantile_ci(np.array([0.2]), reps)
    b = quantile_ci(np.array([0.2 + c]), reps + c)
    assert b.length == pytest.approx(a.length, abs=1e-9)


# -- transformations ---------------------------------------------------------------------


def test_boxcox_lambda_one():
    assert apply_transform(Transform("boxcox", 1.0), 3.0) == 2.0


def test_yeojohnson_lambda_one_is_identity():
    assert apply_transform(Transform("yeojohnson", 1.0), -2.5) == -2.5
    assert apply_transform(Transform("yeojohnson", 1.0), 1.75) == 1.75


def test_log_round_trip(rng):
    x = rng.uniform(1e-3, 1e3, 100)
    t = Transform("log")
    assert np.max(np.abs(invert_transform(t, apply_transform(t, x)) - x)) <= 1e-12


def test_nonpositive_input_rejected():
    for t in (Transform("log"), Transform("boxcox", 0.5)):
        with pytest.raises(DomainError):
            apply_transform(t, np.array([1.0, 0.0]))


def test_yeojohnson_branches():
    # hand-evaluated four-branch definition
    assert apply_transform(Transform("yeojohnson", 0.0), 1.0) == pytest.approx(math.log(2.0))
    assert apply_transform(Transform("yeojohnson", 0.5), 3.0) == pytest.approx((2.0 - 1) / 0.5)
    assert apply_transform(Transform("yeojohnson", 2.0), -1.0) == pytest.approx(-math.log(2.0))
    assert apply_transform(Transform("yeojohnson", 1.5), -3.0) == pytest.approx(-(4.0**0.5 - 1) / 0.5)


@given(
    kind=st.sampled_from(["boxcox", "yeojohnson"]),
    lam=st.sampled_from(list(LAMBDA_GRID)),
    seed=st.integers(0, 2**32 - 1),
)
def test_transform_inverse_and_monotone(kind, lam, seed):
    r = np.random.default_rng(seed)
    x = np.sort(r.uniform(0.05, 5, 30) if kind == "boxcox" else r.uniform(-5, 5, 30))
    t = Transform(kind, lam)
    y = apply_transform(t, x)
    assert np.all(np.diff(y) > 0)
    assert np.max(np.abs(invert_transform(t, y) - x)) <= 1e-10


def test_out_of_range_inverse():
    with pytest.raises(InverseOutOfDomain):
        invert_transform(Transform("boxcox", 0.5), -3.0)


def test_select_lambda_symmetric_ties_to_one():
    reps = np.array([0.4] * 20 + [0.6] * 20)
    assert select_lambda(reps, "yeojohnson").lam == 1.0
    assert select_lambda(reps, "boxcox").lam == 1.0


def test_select_lambda_lognormal(rng):
    reps = np.exp(rng.standard_normal(400))
    t = select_lambda(reps, "boxcox")
    assert abs(t.lam) <= 0.2
    # the oracle: skewness at the chosen value is the grid minimum, and log is near it
    skew = [abs(sample_skewness(apply_transform(Transform("boxcox", g), reps))) for g in LAMBDA_GRID]
    assert abs(sample_skewness(apply_transform(t, reps))) == min(skew)


def test_select_lambda_boxcox_negative():
    with pytest.raises(DomainError):
        select_lambda(np.array([0.5, 0.2, -0.1, 0.3]), "boxcox")


def test_identity_transform_equals_quantile_ci(rng):
    reps = rng.standard_normal((50, 2))
    for k in range(2):
        a = quantile_ci(np.array([0.3, -0.1]), reps, k=k)
        b = transformed_ci(np.array([0.3, -0.1]), reps, Transform("identity"), k=k)
        assert (a.lower, a.upper) == (b.lower, b.upper)


def test_log_ci_three_points():
    reps = np.exp([-0.1, 0.0, 0.1])
    ci = transformed_ci(np.array([1.0]), reps, Transform("log"), level=1.0, min_reps=1)
    assert ci.lower == pytest.approx(math.exp(-0.1), rel=1e-14)
    assert ci.upper == pytest.approx(math.exp(0.1), rel=1e-14)
    assert ci.lower * ci.upper == pytest.approx(1.0, rel=1e-14)


def test_clamped_endpoint_is_flagged():
    # Box-Cox with lambda = 1 has range (-1, inf); a wide reflection leaves it
    reps = np.concatenate([np.full(10, 0.2), np.full(10, 3.0)])
    ci = transformed_ci(np.array([0.3]), reps, Transform("boxcox", 1.0), level=0.9)
    assert ci.clamped == ("lower",) and ci.lower == 0.0
    with pytest.raises(InverseOutOfDomain):
        transformed_ci(np.array([0.3]), reps, Transform("boxcox", 1.0), level=0.9, strict=True)


@given(
    seed=st.integers(0, 2**32 - 1),
    kind=st.sampled_from(["log", "boxcox", "yeojohnson"]),
    lam=st.sampled_from([-1.0, -0.5, 0.0, 0.5, 1.0, 1.5]),
    beta0=st.floats(0.05, 3.0),
)
def test_containment_equivariance(seed, kind, lam, beta0):
    r = np.random.default_rng(seed)
    reps = np.exp(0.3 * r.standard_normal(40))
    b = float(np.exp(0.3 * r.standard_normal()))
    t = Transform(kind, None if kind == "log" else lam)
    ci = transformed_ci(np.array([b]), reps, t)
    if ci.clamped:
        return
    tb, tr = apply_transform(t, b), apply_transform(t, reps)
    lo = 2 * tb - empirical_quantile(tr, 0.975)
    hi = 2 * tb - empirical_quantile(tr, 0.025)
    t0 = apply_transform(t, beta0)
    assert ci.contains(beta0) == (lo <= t0 <= hi) or min(abs(t0 - lo), abs(t0 - hi)) < 1e-9
