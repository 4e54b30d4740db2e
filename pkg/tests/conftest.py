import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""
    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        assert passed, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}")
