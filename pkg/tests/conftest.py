"""Shared fixtures and the session-wide record of robust-loop results.

Every call of ``robust_ngd`` and ``alternating_gd`` made anywhere in the
suite (library internals included) is recorded, so the acceptance module
can assert that all accepted-objective sequences were strictly
decreasing. The acceptance module runs last for that reason.
"""

import os
import sys

import numpy as np
import pytest
from hypothesis import settings

import mbvi.amortize
import mbvi.cli
import mbvi.experiments
import mbvi.optimize

settings.register_profile("mbvi", max_examples=40, deadline=None)
settings.load_profile("mbvi")

LOOP_RESULTS = []
ACCEPTANCE = {}

_orig_robust = mbvi.optimize.robust_ngd
_orig_alt = mbvi.optimize.alternating_gd


def _recorded_robust(*args, **kwargs):
    res = _orig_robust(*args, **kwargs)
    LOOP_RESULTS.append(("robust_ngd", res.accepted_objectives()))
    return res


def _recorded_alt(*args, **kwargs):
    model, res = _orig_alt(*args, **kwargs)
    LOOP_RESULTS.append(("alternating_gd", res.accepted_objectives()))
    return model, res


def pytest_configure(config):
    # the drivers look these names up at call time, so patching the
    # module globals covers internal calls too
    for mod in (mbvi.optimize, mbvi.experiments, mbvi.amortize, mbvi.cli):
        if hasattr(mod, "robust_ngd"):
            mod.robust_ngd = _recorded_robust
        if hasattr(mod, "alternating_gd"):
            mod.alternating_gd = _recorded_alt


def pytest_collection_modifyitems(config, items):
    last = [it for it in items if it.module.__name__.endswith("test_acceptance")]
    rest = [it for it in items if it not in last]
    items[:] = rest + last


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pure_python_env():
    env = dict(os.environ)
    env["MBVI_PURE_PYTHON"] = "1"
    return env


ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
