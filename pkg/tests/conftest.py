"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        outcome = report.outcome.upper()
        if number in _CRITERIA:  # parametrized criterion: fails if any case fails
            previous, earlier = _CRITERIA[number]
            outcome = outcome if previous == "PASSED" else previous
            detail = f"{earlier}; {detail}"
        _CRITERIA[number] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[number]
        status = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
