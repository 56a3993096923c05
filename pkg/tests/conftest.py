import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "passed": True, "seen": False})
    if rep.when == "call" or rep.failed:
        entry["seen"] = True
        entry["passed"] = entry["passed"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "PASS" if e["passed"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number:2d}: {e['title']}")
