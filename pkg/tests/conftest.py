import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str, seconds: float):
        _LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  "
                      f"({seconds:.1f} s)  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
