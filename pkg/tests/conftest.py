import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture()
def verdict(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        status = "PASS" if passed else "FAIL"
        request.config.stash[ACCEPTANCE][number] = f"criterion {number:2d}: {status}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
