import pytest

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_report():
    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}) {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
