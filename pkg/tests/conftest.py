import pytest

# nodeid -> (number, title, detail) for tests marked with ``criterion``
_CRITERIA: dict = {}
_OUTCOMES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Callable that attaches a measured-value string to the criterion line."""
    def note(text):
        n, title, _ = _CRITERIA[request.node.nodeid]
        _CRITERIA[request.node.nodeid] = (n, title, text)
    return note


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _CRITERIA[item.nodeid] = (mark.args[0], mark.args[1], "")


def pytest_runtest_logreport(report):
    if report.nodeid in _CRITERIA and (report.when == "call" or report.failed):
        _OUTCOMES.setdefault(report.nodeid, report.passed)
        if report.failed:
            _OUTCOMES[report.nodeid] = False


def pytest_terminal_summary(terminalreporter):
    ran = [(v, _OUTCOMES[k]) for k, v in _CRITERIA.items() if k in _OUTCOMES]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title, text), ok in sorted(ran, key=lambda r: r[0][0]):
        line = f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
