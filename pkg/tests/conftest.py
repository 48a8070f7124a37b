import pytest

# criterion label -> (passed, description, measured detail)
_RESULTS: dict[str, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the summary table."""

    def record(label: str, passed: bool, what: str, detail: str = "") -> bool:
        _RESULTS[label] = (bool(passed), what, detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS):
        passed, what, detail = _RESULTS[label]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{label}] {what}: {detail}")
