import pytest

_CRITERIA: dict = {}


@pytest.fixture()
def criterion():
    """``criterion(k, ok, detail)`` records a PASS/FAIL line for acceptance criterion ``k`` and asserts."""

    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[k] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
