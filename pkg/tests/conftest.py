"""Shared pytest wiring.

The acceptance tests each record one PASS/FAIL line; printing them from
inside a test would be swallowed by output capture, so they are collected
here and echoed as a terminal section after the run.
"""

ACCEPTANCE_LINES = []


def record_acceptance_line(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checklist")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
