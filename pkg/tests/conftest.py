"""Shared pytest plumbing for the acceptance scoreboard.

test_acceptance.py records one verdict line per criterion through
`record`; echoing them after the run keeps the verdicts visible even when
everything passes and pytest swallows per-test stdout.
"""

acceptance_lines: list = []


def record(line: str) -> None:
    acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
