"""Suite-wide hooks: the acceptance summary block."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    match = _CRITERION.search(report.nodeid)
    if match:
        _results[int(match.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        outcome = "PASS" if _results[number] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {outcome}")
