import pytest

REPORT_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def report(request):
    """Collects one PASS/FAIL line per acceptance criterion."""
    return request.config.stash.setdefault(REPORT_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
