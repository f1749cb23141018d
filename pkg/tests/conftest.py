import os
import sys

# Lets tests import the local AES reference module.
sys.path.insert(0, os.path.dirname(__file__))

import pytest

CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
