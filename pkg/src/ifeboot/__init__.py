"""Bias-corrected inference for binary-choice panels with interactive fixed effects."""

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .panel import PanelData  # noqa: E402
from .likelihood import Family, FactorParams, loglik  # noqa: E402
from .estimator import (  # noqa: E402
    EstimatorOptions,
    FitResult,
    fit,
    select_num_factors,
    tuning_select,
    twoway_init,
)
from .bias import analytical_correct, orthogonalize, split_panel_jackknife  # noqa: E402
from .bootstrap import (  # noqa: E402
    ConfidenceInterval,
    Transform,
    bias_correct,
    quantile_ci,
    run_bootstrap,
    select_lambda,
    transformed_ci,
)
from .ape import EffectSpec, ape_bootstrap_ci, ape_plugin  # noqa: E402
from .simlab import McReport, ScenarioSpec, generate, render, run_mc  # noqa: E402
