import pytest

_VERDICTS = []


class Criterion:
    """Records one acceptance verdict; printed at the end of the session."""

    def __init__(self, name):
        self.name = name
        self.detail = ""
        self.passed = None

    def check(self, passed, detail):
        self.passed, self.detail = bool(passed), detail
        line = f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {detail}"
        print(line)
        assert self.passed, line


@pytest.fixture
def criterion(request):
    c = Criterion(request.node.function.__doc__.strip().splitlines()[0])
    yield c
    if c.passed is None:
        c.passed, c.detail = False, "did not complete"
    _VERDICTS.append(c)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in _VERDICTS:
        terminalreporter.write_line(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
