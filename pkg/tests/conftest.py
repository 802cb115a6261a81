import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# "criterion N: PASS/FAIL ..." lines collected by test_acceptance
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
