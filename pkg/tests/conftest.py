import pytest

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and echo it."""
    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print("\n" + line, flush=True)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
