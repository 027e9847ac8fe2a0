import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERION_RESULTS = []


def report_criterion(number: int, message: str):
    """Record an acceptance-criterion result for the terminal summary."""
    line = f"[PASS] criterion {number:2d}: {message}"
    _CRITERION_RESULTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_RESULTS:
            terminalreporter.write_line(line)
