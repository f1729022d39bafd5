"""Collects one PASS/FAIL line per acceptance criterion and prints them in
the terminal summary."""

import pytest

_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
        if rep.when == "setup" and rep.failed:
            detail = detail or "setup error"
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        _LINES.append(f"{status} {mark.args[0]}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
