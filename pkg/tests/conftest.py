import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from drawdown_opt import cli, reservoir, sampling, workflow  # noqa: E402
from drawdown_opt.reservoir import ModelConfig, build_model  # noqa: E402

MASS_BALANCE_TOL = 1e-6
# every simulate run made anywhere in the suite lands here
SIM_LOG = []

_simulate = reservoir.simulate


def _checked_simulate(model, trajectory, substeps_per_control=None):
    res = _simulate(model, trajectory, substeps_per_control)
    SIM_LOG.append(res.mass_balance_error)
    assert res.mass_balance_error < MASS_BALANCE_TOL, f"mass balance error {res.mass_balance_error:.3e}"
    return res


@pytest.fixture(autouse=True, scope="session")
def mass_balance_guard():
    mods = [reservoir, sampling, workflow, cli]
    for m in mods:
        m.simulate = _checked_simulate
    yield SIM_LOG
    for m in mods:
        m.simulate = _simulate


SMALL = dict(nx=11, ny=5, n_control=5, horizon_days=360.0, substeps=3)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(**SMALL)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return build_model(small_cfg)


@pytest.fixture(scope="session")
def small_flow_model(small_cfg):
    return build_model(small_cfg.with_scenario("flow_only"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
