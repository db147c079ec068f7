"""Shared pytest hooks for the suite."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay acceptance verdict lines after the run.

    The acceptance tests print one pass/fail line per guarantee, but pytest
    captures stdout on passing tests. Echoing the recorded lines here keeps
    the measured numbers visible in plain ``pytest -v`` logs.
    """
    lines = []
    for name, mod in sys.modules.items():
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "RECORDED", [])
            break
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
