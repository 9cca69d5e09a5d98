import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def record_criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
