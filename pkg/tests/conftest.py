"""Shared fixtures: the default config, stored regression gaits and one full sweep.

The compiled kernels take several seconds to build per process, so the
expensive objects here are session-scoped and the CLI is driven in-process.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from tslip.config import load_config
from tslip.engine import run_gait
from tslip.io import read_timeseries
from tslip.sweep import run_sweep

FIXTURES = Path(__file__).parent / "fixtures"

# kernels compile on first use, so per-example deadlines are meaningless;
# a fixed example database keeps the suite reproducible
settings.register_profile("tslip", deadline=None, derandomize=True)
settings.load_profile("tslip")


@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture(scope="session")
def fixture_index():
    return json.loads((FIXTURES / "fixtures.json").read_text())


@pytest.fixture(scope="session")
def fixture_gaits(fixture_index):
    """Stored 5 m/s gaits keyed by VP radius, as reloaded stride records."""
    return {g["vp_radius"]: read_timeseries(FIXTURES / g["file"]) for g in fixture_index["gaits"]}


@pytest.fixture(scope="session")
def gait_runs(cfg):
    """Fresh converged runs at 5 m/s for the fixture radii, keyed by radius."""
    out = {}
    for r in (0.0, 0.4, -0.4):
        c = cfg.with_overrides(vp_radius=r, speed=5.0)
        run = run_gait(c.model_params(), c.controller_config(), c.vp_target(), 5.0, c.stride_budget,
                       limits=c.limits())
        run.raise_for_failure()
        out[r] = run
    return out


@pytest.fixture(scope="session")
def sweep(cfg):
    """The default VP-radius x speed grid with per-speed damping tuning."""
    plan = cfg.sweep_plan()
    return run_sweep(plan, cfg.model_params(damping=0.0), cfg.controller_config(), cfg.schedule(),
                     keep_runs=True, config_hash=cfg.digest())


# -- acceptance verdicts ------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and return the flag."""

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, end=" ")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


# -- independent oracles ----------------------------------------------------
# These recompute quantities from logged columns with plain numpy and the
# model geometry, without calling the package's force or metric code.

def oracle_vp_moment(stride, radius, angle, body_frame, l0=1.0):
    """|moment of the logged GRF about the VP| / (|GRF| * max(|r|, l0)) per stance sample."""
    m = stride.phase == 1
    x, y, th = stride.states[m, 0], stride.states[m, 1], stride.states[m, 2]
    phi = angle + (th if body_frame else 0.0)
    vx_, vy_ = x + radius * np.sin(phi), y + radius * np.cos(phi)
    g = stride.grf[m]
    mom = (vx_ - stride.foot_x) * g[:, 1] - vy_ * g[:, 0]
    return np.abs(mom) / (np.hypot(g[:, 0], g[:, 1]) * max(abs(radius), l0))


def oracle_accelerations(stride, mass, inertia, gravity, r_hc):
    """Accelerations from the logged GRF via Newton-Euler, per stance sample."""
    m = stride.phase == 1
    st = stride.states[m]
    g = stride.grf[m]
    ax = g[:, 0] / mass
    ay = g[:, 1] / mass - gravity
    # moment of the GRF about the CoM (foot on the ground at foot_x)
    rx = stride.foot_x - st[:, 0]
    ry = -st[:, 1]
    alpha_ccw = (rx * g[:, 1] - ry * g[:, 0]) / inertia
    return stride.t[m], np.column_stack([ax, ay, -alpha_ccw])


def oracle_energy(state, mass, inertia, gravity):
    return 0.5 * mass * (state[3] ** 2 + state[4] ** 2) + 0.5 * inertia * state[5] ** 2 + mass * gravity * state[1]
