import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """``acceptance(number, title, passed, detail)`` records one criterion line."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
