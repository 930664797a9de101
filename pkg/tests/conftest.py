import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
