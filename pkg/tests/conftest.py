from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

# (criterion, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def acceptance():
    def record(criterion: str, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((criterion, bool(passed), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
