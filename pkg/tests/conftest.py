import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    def record(number, passed, detail=""):
        _LINES.append((number, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
