import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from helpers import ACCEPTANCE  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail, secs in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail} [{secs:.2f} s]")
