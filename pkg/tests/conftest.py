import pytest

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    """Report one criterion: prints a PASS/FAIL line and fails the test if needed."""

    def record(number, title, failures):
        status = "PASS" if not failures else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        if failures:
            line += " | " + "; ".join(failures)
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failures, line

    return record
