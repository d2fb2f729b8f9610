from hypothesis import settings

# reproducible property tests: the same examples on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
