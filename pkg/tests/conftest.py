"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
from collections import defaultdict

import pytest

_outcomes: dict[int, list[bool]] = defaultdict(list)
_titles: dict[int, str] = {}
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): test backing acceptance criterion n")


@pytest.fixture
def note(request):
    """Attach a measurement line to the current test's criterion in the final summary."""
    n = request.node.get_closest_marker("criterion").args[0]
    return _notes[n].append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _titles[n] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[n].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {_titles[n]}")
        for line in _notes[n]:
            terminalreporter.write_line(f"    {line}")
