import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE_RESULTS: dict[str, str] = {}
SUITE_BUDGET_S = 60.0
_started = time.perf_counter()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_sessionstart(session):
    global _started
    _started = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    elapsed = time.perf_counter() - _started
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        status = ACCEPTANCE_RESULTS[name]
        if name.startswith("7 ") and status == "PASS" and elapsed >= SUITE_BUDGET_S:
            status = "FAIL"
        terminalreporter.write_line(f"{status}  criterion {name}")
    terminalreporter.write_line(f"suite wall time {elapsed:.1f} s (budget {SUITE_BUDGET_S:.0f} s)")
