"""Shared pytest wiring.

The acceptance tests append their verdict lines here so the full-suite
output always ends with one PASS/FAIL/SKIP line per criterion, even though
normal capture hides in-test prints.
"""

VERDICTS: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
