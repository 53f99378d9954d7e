import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``report(n, ok, detail)``: print one verdict line for a criterion, then assert it."""
    config = request.config
    lines = config.stash.setdefault(_LINES, [])
    terminal = config.pluginmanager.get_plugin("terminalreporter")

    def report(n, ok, detail):
        line = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        if terminal is not None:
            terminal.write_line("")
            terminal.write_line(line)
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
