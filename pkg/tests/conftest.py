import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary, then assert."""

    def check(number, name, ok, detail=""):
        _ACCEPTANCE.append((number, name, bool(ok), detail))
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(_ACCEPTANCE, key=lambda t: (t[0], t[1])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")
