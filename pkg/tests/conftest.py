import pytest

RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for a numbered acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        request.config.stash.setdefault(RESULTS, {})[number] = (title, bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(RESULTS, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
