"""Per-criterion PASS/FAIL summary for tests marked ``@pytest.mark.criterion(n, title)``."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = (marker.args[0], marker.args[1])


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None or (report.when != "call" and report.outcome == "passed"):
        return
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    reason = ""
    if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
        reason = report.longrepr[2].removeprefix("Skipped: ")
    prev = _results.get(crit)
    # a failure anywhere fails the criterion; a pass outranks a skip
    if prev is None or status == "FAIL" or (status == "PASS" and prev[0] == "SKIP"):
        _results[crit] = (status, reason)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), (status, reason) in sorted(_results.items()):
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" ({reason})" if reason else ""))
