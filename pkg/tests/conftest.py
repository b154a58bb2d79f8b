import pytest

_OUTCOMES = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the test's criterion."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        if mark is not None:
            _DETAILS.setdefault(mark.args[0], []).append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    number, title = mark.args
    passed, _ = _OUTCOMES.get(number, (True, title))
    _OUTCOMES[number] = (passed and report.passed, title)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        passed, title = _OUTCOMES[number]
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}"
        if _DETAILS.get(number):
            line += "  [" + "; ".join(_DETAILS[number]) + "]"
        terminalreporter.write_line(line)
