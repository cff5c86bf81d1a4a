"""Shared pytest hooks for the suite."""
import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance verdict lines after the run so they stay
    visible even with output capture enabled."""
    module = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    lines = getattr(module, "RESULTS", []) if module else []
    if not lines:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance verdicts", sep="-")
    for line in lines:
        terminalreporter.write_line(line)
