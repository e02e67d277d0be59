"""Shared fixtures.  The IEEE 14-bus runs are expensive, so each one is
computed once per session and reused by every test that needs it."""

from __future__ import annotations

import time

import pytest

from circuit_tsa.case import load_shipped_case
from circuit_tsa.engine import SolverConfig
from circuit_tsa.oracle import run_reference_dae
from circuit_tsa.scenario import run_scenario

FINE_ORACLE_DT = 2.5e-4


@pytest.fixture(scope="session")
def ieee14():
    return load_shipped_case("ieee14_modified")


@pytest.fixture(scope="session")
def eventless14(ieee14):
    return ieee14.copy(events=[])


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def fault_run_1ms(ieee14):
    """Circuit path, 20 s fault scenario at the default step; returns (series, wall seconds)."""
    return _timed(run_scenario, ieee14, SolverConfig(dt=1e-3, t_stop=20.0))


@pytest.fixture(scope="session")
def fault_run_05ms(ieee14):
    return _timed(run_scenario, ieee14, SolverConfig(dt=5e-4, t_stop=20.0))[0]


@pytest.fixture(scope="session")
def oracle_1ms(ieee14):
    return run_reference_dae(ieee14, dt=1e-3, t_stop=20.0)


@pytest.fixture(scope="session")
def oracle_eventless(eventless14):
    return run_reference_dae(eventless14, dt=1e-3, t_stop=5.0)


@pytest.fixture(scope="session")
def oracle_fine(ieee14):
    return run_reference_dae(ieee14, dt=FINE_ORACLE_DT, t_stop=20.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(label: str, passed: bool, detail: str) -> None:
    line = f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
