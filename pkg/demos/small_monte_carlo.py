"""A few replications of the simulation harness, rendered as tables.

Run with ``python demos/small_monte_carlo.py [reps] [B]``. The defaults
(10 replications, 99 bootstrap samples) finish in a few minutes; the
acceptance suite uses 50 or 200 replications with B = 199.
"""

import sys

from ifeboot.simlab import ScenarioSpec, render, run_mc

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 10
B = int(sys.argv[2]) if len(sys.argv) > 2 else 99

spec = ScenarioSpec(scenario="s1", family="logit", N=30, T=20, mc_reps=reps, B=B, seed=1, ape=True)
report = run_mc(spec, progress=lambda done, total: print(f"\r{done}/{total}", end="", file=sys.stderr))
print(file=sys.stderr)
print(render(report, "text"))

# The same report as CSV, which reads back with ifeboot.simlab.report_from_csv.
print(render(report, "csv"))
