import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_log.RESULTS:
            terminalreporter.write_line(line)
