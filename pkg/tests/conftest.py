import pytest

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record the outcome of a numbered acceptance criterion."""
    log = request.config.stash.setdefault(CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> None:
        log[number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(CRITERIA, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(log):
        ok, detail = log[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
