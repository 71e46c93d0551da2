import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def report_line(request):
    """Record a one-line verdict; all lines are repeated in the terminal summary."""
    lines = request.config.stash[_LINES]
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(text: str) -> None:
        lines.append(text)
        if tr is not None:
            tr.write_line(text)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
