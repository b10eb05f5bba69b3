import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and fail the test when the criterion fails."""

    def record(criterion: str, passed: bool | None, detail: str, gating: bool = True):
        if passed is None:
            status = "SKIP"
        else:
            status = "PASS" if passed else ("FAIL" if gating else "WARN")
        line = f"[{status}] criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        if passed is None:
            pytest.skip(detail)
        assert passed or not gating, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
