from __future__ import annotations

import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record one summary line per acceptance criterion; printed at the end of the run."""

    def record(number: int, passed: bool, detail: str, seconds: float, limit: float) -> None:
        ok = passed and seconds <= limit
        _ACCEPTANCE[number] = (
            f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail} | {seconds:.1f} s (limit {limit:.0f} s)"
        )
        print(_ACCEPTANCE[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
