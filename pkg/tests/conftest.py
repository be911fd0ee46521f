import json
import os

import numpy as np
import pytest

_ORACLE_PATH = os.path.join(os.path.dirname(__file__), "oracles", "values.json")


@pytest.fixture(scope="session")
def oracle():
    """Frozen values from ``tests/oracles/derive.py`` (exact symbolic arithmetic)."""
    with open(_ORACLE_PATH) as fh:
        return json.load(fh)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
