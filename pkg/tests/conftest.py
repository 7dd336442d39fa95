"""Collects acceptance verdicts and repeats them at the end of the run."""

import re

VERDICTS = []


def _criterion_key(line):
    num, suffix = re.match(r"\S+ criterion (\d+)(\w*):", line).groups()
    return int(num), suffix


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=_criterion_key):
            terminalreporter.write_line(line)
