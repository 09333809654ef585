import pytest

# (criterion number, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE = []


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE.append((number, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
