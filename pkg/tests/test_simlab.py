import json
import math

import numpy as np
import pytest

from ifeboot.errors import TooManyFailures
from ifeboot.simlab import (
    CI_LABELS,
    METHOD_LABELS,
    McReport,
    ScenarioSpec,
    generate,
    render,
    replicate,
    report_from_csv,
    report_from_json,
    run_mc,
    summarize,
)


def test_s1_regressor_uncorrelated_with_effects():
    spec = ScenarioSpec(N=30, T=40, seed=8)
    corrs = []
    for rep in range(50):
        d, p = generate(spec, rep)
        corrs.append(np.corrcoef(d.x[0].ravel(), (p.alpha @ p.gamma.T).ravel())[0, 1])
    assert abs(np.mean(corrs)) < 0.1


def test_s2_regressor_correlated_with_effects():
    spec = ScenarioSpec(scenario="s2", N=30, T=40, seed=8)
    d, p = generate(spec, 0)
    assert np.corrcoef(d.x[0].ravel(), (p.alpha @ p.gamma.T).ravel())[0, 1] > 0.2


@pytest.mark.parametrize("n", [7, 30, 41])
def test_s3_outlier_count(n):
    for rep in range(5):
        _, p = generate(ScenarioSpec(scenario="s3", N=n, T=10, seed=1), rep)
        assert int(np.all(p.alpha == 3.0, axis=1).sum()) == math.ceil(0.10 * n)


@pytest.mark.parametrize("t", [7, 20, 41])
def test_s4_spike_count(t):
    # loadings and factors are drawn first, so the S1 draw holds the pre-spike factors
    for rep in range(5):
        _, spiked = generate(ScenarioSpec(scenario="s4", N=10, T=t, seed=1), rep)
        _, plain = generate(ScenarioSpec(scenario="s1", N=10, T=t, seed=1), rep)
        ratio = np.linalg.norm(spiked.gamma, axis=1) / np.linalg.norm(plain.gamma, axis=1)
        assert int(np.isclose(ratio, 10.0, rtol=1e-14).sum()) == math.ceil(0.05 * t)
        assert int(np.isclose(ratio, 1.0, rtol=1e-14).sum()) == t - math.ceil(0.05 * t)


def test_generate_deterministic_and_rep_dependent():
    spec = ScenarioSpec(N=12, T=9, seed=3, family="probit")
    a, pa = generate(spec, 4)
    b, pb = generate(spec, 4)
    c, _ = generate(spec, 5)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x) and np.array_equal(pa.alpha, pb.alpha)
    assert not np.array_equal(a.x, c.x)


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(d_f=0)
    with pytest.raises(ValueError):
        ScenarioSpec(beta0=math.inf)
    with pytest.raises(ValueError):
        ScenarioSpec(scenario="s5")


@pytest.fixture(scope="module")
def one_rep_report():
    return run_mc(ScenarioSpec(mc_reps=1, B=25, seed=2))


def test_single_replication_smoke(one_rep_report):
    rep = one_rep_report
    assert rep.replications == 1 and rep.failures == 0
    assert [r.method for r in rep.rows] == ["mle", "splitpj", "analytical", "boot_mean", "boot_median"]
    assert [r.method for r in rep.ci_rows] == ["boot", "log", "boxcox", "yeojohnson"]


def test_text_table_rows(one_rep_report):
    text = render(one_rep_report, "text")
    for label in list(METHOD_LABELS.values()) + list(CI_LABELS.values()):
        assert sum(line.startswith(label + " ") for line in text.splitlines()) == 1


def test_json_idempotent(one_rep_report):
    a = render(one_rep_report, "json")
    b = json.dumps(json.loads(a), indent=2, sort_keys=True)
    assert a == b
    assert render(report_from_json(a), "json") == a


def _same_report(a, b):
    # field-wise comparison to 1e-12; sd is NaN with a single replication
    assert (a.spec, a.replications, a.failures, a.ape) == (b.spec, b.replications, b.failures, b.ape)
    for ra, rb in zip(a.rows + a.ci_rows, b.rows + b.ci_rows, strict=True):
        assert type(ra) is type(rb) and ra.method == rb.method and ra.n == rb.n
        va = [v for v in vars(ra).values() if isinstance(v, float)]
        vb = [v for v in vars(rb).values() if isinstance(v, float)]
        np.testing.assert_allclose(va, vb, rtol=0, atol=1e-12, equal_nan=True)


def test_csv_round_trip(one_rep_report):
    _same_report(report_from_csv(render(one_rep_report, "csv")), one_rep_report)


def _records(rng, n):
    # synthetic replication records with random intervals around 0.5
    recs = []
    for r in range(n):
        lo = 0.5 + rng.normal(0, 0.2)
        recs.append({"rep": r, "ok": True, "est": {"mle": lo + 0.1}, "ci": {"mle": [lo, lo + 0.2], "ci:boot": [lo, lo + 0.3]}})
    return recs


def test_coverage_and_miss_rates_partition(rng):
    spec = ScenarioSpec(methods=("mle",), ci_methods=("boot",))
    rep = summarize(spec, _records(rng, 137))
    row = rep.ci_row("boot")
    counts = [round(v * row.n) for v in (row.coverage, row.lmr, row.umr)]
    assert sum(counts) == row.n == 137
    assert row.coverage + row.lmr + row.umr == pytest.approx(1.0, abs=1e-15)
    assert 0 < row.lmr < 1 and 0 < row.umr < 1


def test_summary_metrics_by_hand():
    spec = ScenarioSpec(beta0=0.5, h0_value=0.7, methods=("mle",), ci_methods=("boot",))
    recs = [
        {"rep": 0, "ok": True, "est": {"mle": 0.6}, "ci": {"mle": [0.4, 0.8], "ci:boot": [0.55, 0.9]}},
        {"rep": 1, "ok": True, "est": {"mle": 0.8}, "ci": {"mle": [0.6, 1.0], "ci:boot": [0.3, 0.45]}},
        {"rep": 2, "ok": False, "est": {}, "ci": {}},
    ]
    rep = summarize(spec, recs)
    m = rep.row("mle")
    assert m.relative_bias == pytest.approx(0.4)
    assert m.sd == pytest.approx(np.std([0.6, 0.8], ddof=1))
    assert (m.coverage, m.rejection) == (0.5, 0.0)
    c = rep.ci_row("boot")
    assert (c.coverage, c.lmr, c.umr, c.rejection) == (0.0, 0.5, 0.5, 0.5)
    assert c.mean_length == pytest.approx(0.25)
    assert (rep.replications, rep.failures) == (3, 1)


def test_too_many_failures(monkeypatch):
    import ifeboot.simlab as sl

    calls = iter(range(100))

    def flaky(spec, rep):
        ok = next(calls) % 3 != 0
        return {"rep": rep, "ok": ok, "error": None if ok else "boom", "est": {}, "ci": {}}

    monkeypatch.setattr(sl, "replicate", flaky)
    with pytest.raises(TooManyFailures):
        run_mc(ScenarioSpec(mc_reps=6, methods=("mle",), ci_methods=()))


def test_parallelism_invariant():
    spec = ScenarioSpec(mc_reps=2, B=20, seed=5, ci_methods=("boot", "yeojohnson"))
    a = run_mc(spec, jobs=1)
    b = run_mc(spec, jobs=2)
    assert a.to_dict() | {"wall_time": None} == b.to_dict() | {"wall_time": None}


def test_replicate_deterministic():
    spec = ScenarioSpec(B=20, seed=6, methods=("mle", "boot_mean"), ci_methods=("boot",))
    assert replicate(spec, 0) == replicate(spec, 0)


def test_report_dict_round_trip(one_rep_report):
    _same_report(McReport.from_dict(one_rep_report.to_dict()), one_rep_report)


def test_ape_interval_too_few_replicates_is_noted():
    spec = ScenarioSpec(N=10, T=8, mc_reps=1, B=5, seed=4, methods=("mle",), ci_methods=(), ape=True)
    rec = replicate(spec, 0)
    assert rec["ok"] and "ape" not in rec
    assert rec["notes"]["ape"].startswith("TooFewReplicates")
