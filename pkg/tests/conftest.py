import pytest

_LINES = []


@pytest.fixture
def record_criterion():
    """Register one PASS/FAIL summary line; also printed immediately."""
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
