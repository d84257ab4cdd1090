import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REPORT = []


@pytest.fixture(scope="session")
def report():
    """Record one acceptance line per criterion; printed again in the terminal summary."""
    def add(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _REPORT.append(line)
        print(line)
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
