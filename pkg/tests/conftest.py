import pytest

_LINES = []


@pytest.fixture
def criterion():
    """``criterion(name, passed, detail)`` records one acceptance verdict line."""
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
