import pytest

# criterion number -> (passed, summary line), filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {line}")


@pytest.fixture()
def criterion():
    """Record one summary line per acceptance criterion, then assert it."""

    def record(number: int, passed: bool, line: str):
        ACCEPTANCE[number] = (bool(passed), line)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {line}")
        assert passed, line

    return record
