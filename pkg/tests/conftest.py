import pytest

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def record():
    """Store one PASS/FAIL line per acceptance criterion and fail on FAIL."""

    def _record(key: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}"
        ACCEPTANCE[key] = line
        print(line)
        assert passed, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
