"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import pytest

_outcomes: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and report.passed:
        return
    number, title = marker.args
    _, states = _outcomes.setdefault(number, (title, []))
    states.append("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, states = _outcomes[number]
        verdict = "PASS" if states and all(s == "PASS" for s in states) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
