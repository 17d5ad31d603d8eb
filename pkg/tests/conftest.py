import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record a named acceptance line: ``criterion("3 driftless Gaussian", ok, detail)``."""

    def record(name, ok, detail=""):
        _RESULTS[name] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")
