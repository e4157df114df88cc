import pytest

_RESULTS: dict[int, tuple[str, str]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    details = _DETAILS.setdefault(n, [])
    for k, v in item.user_properties:
        if f"{k}={v}" not in details:
            details.append(f"{k}={v}")
    if details:
        title = f"{title} [{'; '.join(details)}]"
    if rep.failed:
        _RESULTS[n] = ("FAIL", title)
    elif rep.when == "call" and rep.passed and _RESULTS.get(n, ("PASS",))[0] != "FAIL":
        _RESULTS[n] = ("PASS", title)
    elif rep.skipped:
        _RESULTS.setdefault(n, ("SKIP", title))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")
