import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _CRITERIA_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA_LINES):
        terminalreporter.write_line(_CRITERIA_LINES[number])
