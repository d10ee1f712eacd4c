"""Collects acceptance verdicts and prints them together at the end of the run."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
