import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
