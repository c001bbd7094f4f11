import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(RESULTS, key=lambda r: r[0]):
            terminalreporter.write_line(line)
