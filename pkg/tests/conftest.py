import sys
from pathlib import Path

import pytest

# lets test modules import the shared ``oracles`` helper
sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """``report(number, status, detail)`` records and prints one criterion line."""
    lines = request.config.stash[ACCEPTANCE]

    def report(number, status, detail):
        if not isinstance(status, str):
            status = "PASS" if status else "FAIL"
        line = f"criterion {number:>2}: {status}  {detail}"
        lines[number] = line
        print(line)
        return status == "PASS"

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
