"""Shared pytest plumbing for the suite.

The acceptance tests report one verdict line per criterion.  Default
output capture would swallow those prints on success, so they are
collected here and replayed in a summary section once capture is done.
"""

VERDICTS = []


def record_verdict(line: str) -> None:
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.line(line)
