import pytest

_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criteria():
    """Collects one verdict line per acceptance criterion."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
