"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(label, ok, detail)`` records the outcome of one criterion and asserts it."""

    def record(label, ok, detail=""):
        ACCEPTANCE[label] = (bool(ok), detail)
        assert ok, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda s: (len(s.split()[0]), s)):
        ok, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
