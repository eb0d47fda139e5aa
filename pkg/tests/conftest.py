import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent

_acceptance: dict[str, tuple[str, str]] = {}


@pytest.fixture
def scenarios_dir() -> Path:
    return ROOT / "scenarios"


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for name, value in report.user_properties:
        if name == "criterion":
            _acceptance[value] = ("PASS" if report.passed else "FAIL", report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_acceptance, key=lambda c: int(c.split(".")[0])):
        outcome, nodeid = _acceptance[criterion]
        terminalreporter.write_line(f"[{outcome}] {criterion}")
