"""Walk through the estimator and its bootstrap inference on one simulated panel.

Run with ``python demos/quickstart.py``. Takes about a minute on one core,
most of it in the 399 bootstrap refits.
"""

import numpy as np

from ifeboot import (
    EffectSpec,
    Transform,
    analytical_correct,
    ape_bootstrap_ci,
    bias_correct,
    fit,
    quantile_ci,
    run_bootstrap,
    select_lambda,
    select_num_factors,
    split_panel_jackknife,
    transformed_ci,
)
from ifeboot.simlab import ScenarioSpec, generate

# A 30 x 20 logit panel with two factors and beta0 = 0.5.
data, truth = generate(ScenarioSpec(N=30, T=20, family="logit", seed=3), rep=0)
print("panel", data.shape, "share of ones", data.y.mean().round(3))

# How many factors does the eigenvalue-ratio rule see?
sel = select_num_factors(data, "logit", r_max=5)
print("singular values", np.round(sel.singular_values[:6], 2), "chosen d_f", sel.chosen)

# Two-step estimate with the true number of factors.
res = fit(data, "logit", d_f=2)
print(f"beta_hat {res.beta[0]:.4f}  converged {res.converged}  penalty {res.tuning[1]:.3f}")

# Analytical and split-panel jackknife corrections.
ac = analytical_correct(data, res)
spj = split_panel_jackknife(data, "logit", 2, full_fit=res)
print(f"analytical {ac.beta_corrected[0]:.4f} (se {ac.se[0]:.4f})  jackknife {spj.beta_corrected[0]:.4f}")

# Parametric bootstrap: outcomes redrawn from the fitted model, X held fixed.
ape_spec = EffectSpec(0, "marginal")
run = run_bootstrap(data, res, B=399, seed=11, ape_spec=ape_spec)
print(f"bootstrap replicates {run.b_effective} of {run.b_count}")
print(f"boot-mean {bias_correct(res.beta, run, 'mean')[0]:.4f}  boot-median {bias_correct(res.beta, run, 'median')[0]:.4f}")

# Plain and transformed intervals.
intervals = {"boot": quantile_ci(res.beta, run), "log": transformed_ci(res.beta, run, Transform("log"))}
for kind in ("boxcox", "yeojohnson"):
    intervals[kind] = transformed_ci(res.beta, run, select_lambda(run, kind))
for name, ci in intervals.items():
    lam = "" if ci.transform is None or ci.transform.lam is None else f"  lambda {ci.transform.lam:g}"
    print(f"{name:>11}: [{ci.lower:.3f}, {ci.upper:.3f}]  length {ci.length:.3f}{lam}")

# Average partial effect of the covariate, against the value at the true parameters.
ape = ape_bootstrap_ci(data, res, "logit", ape_spec, run)
from ifeboot.ape import ape_value  # noqa: E402

print(f"APE {ape.point:.4f}  CI [{ape.ci.lower:.4f}, {ape.ci.upper:.4f}]  truth {ape_value(data, truth, 'logit', ape_spec):.4f}")
