"""Collects acceptance verdicts and prints them after the test run."""

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line."""

    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
