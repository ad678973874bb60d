import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, name, ok, detail, seconds, budget):
        within = seconds < budget
        status = "PASS" if ok and within else "FAIL"
        _LINES.append(f"[{status}] criterion {number}: {name}: {detail} ({seconds:.3g}s, budget {budget:g}s)")
        assert ok, f"criterion {number} failed: {detail}"
        assert within, f"criterion {number} over its {budget:g}s budget: {seconds:.3g}s"

    def skip(number, name, reason):
        _LINES.append(f"[SKIP] criterion {number}: {name}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
