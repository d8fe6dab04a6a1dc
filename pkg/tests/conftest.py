"""Collects the acceptance suite's per-criterion verdict lines and prints
them in the terminal summary, so they appear whether or not output capture
is on."""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
