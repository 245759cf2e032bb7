import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, passed, detail)`` records one acceptance line and prints it."""
    def record(n: int, title: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[n] = (bool(passed), title, detail)
        print(f"criterion {n} {'PASS' if passed else 'FAIL'}: {title} [{detail}]")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if passed else 'FAIL'}: {title} [{detail}]")
