import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ifeboot.panel import PanelData

settings.register_profile("ifeboot", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ifeboot")

# acceptance criterion -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tier = "full" if os.environ.get("IFEBOOT_FULL") == "1" else "smoke"
    terminalreporter.section(f"acceptance criteria ({tier} tier)")
    for key in sorted(ACCEPTANCE, key=lambda s: (int(s.split(".")[0]), s)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


def random_panel(rng, n, t, k=1, d_f=1, beta=0.5, family="logit"):
    """Small panel drawn from the factor model, with the generating parameters."""
    x = rng.standard_normal((k, n, t))
    alpha = rng.standard_normal((n, d_f))
    gamma = rng.standard_normal((t, d_f))
    z = np.tensordot(np.full(k, beta), x, axes=(0, 0)) + alpha @ gamma.T
    eps = rng.logistic(size=(n, t)) if family == "logit" else rng.standard_normal((n, t))
    y = (z - eps > 0).astype(float)
    return PanelData(y, x), alpha, gamma


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
