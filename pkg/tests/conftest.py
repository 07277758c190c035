"""Shared expensive runs: each benchmark is solved once per session."""
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import pytest

from freebound import cli, oracle, solver

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

_ACCEPTANCE_LINES = []


@dataclass
class Benchmark:
    cfg: cli.RunConfig
    solver: solver.BoundarySolver
    result: solver.RunResult
    seconds: float
    _bounds: Optional[dict] = None

    def bounds(self):
        if self._bounds is None:
            self._bounds = solver.bounds_report(self.solver, self.result.state)
        return self._bounds


def _solve(name):
    cfg = cli.load_config(CONFIGS / name)
    slv = solver.make_solver(cfg.build_model(), config=cfg.solver_config(), rule=cfg.rule())
    t0 = time.perf_counter()
    res = solver.run(slv.model, solver=slv)
    return Benchmark(cfg, slv, res, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def bs1d():
    return _solve("bs1d.json")


@pytest.fixture(scope="session")
def bs1d_v():
    return _solve("bs1d_v.json")


@pytest.fixture(scope="session")
def basket2d():
    return _solve("basket2d.json")


@pytest.fixture(scope="session")
def crr5000():
    return oracle.binomial_boundary(100.0, 0.05, 0.2, 1.0, steps=5000)


@pytest.fixture(scope="session")
def psor2d():
    cfg = cli.load_config(CONFIGS / "basket2d.json")
    return oracle.psor_boundary(cfg.build_model(), cfg.oracle.grid)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
