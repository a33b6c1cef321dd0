import os

import pytest

_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(line: str) -> None:
        print(line)
        _LINES.append(line)

    return record


@pytest.fixture(scope="session")
def workers():
    return os.cpu_count() or 1


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
