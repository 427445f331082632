import pytest

ACCEPTANCE_RESULTS = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(criterion, ok, detail)``."""
    def _add(criterion: int, ok: bool, detail: str):
        ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    return _add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {detail}")
