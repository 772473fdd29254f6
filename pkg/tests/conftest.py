"""Collects acceptance outcomes and prints one line per criterion after the run."""
import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed:
        msg = str(report.longrepr).strip().splitlines()
        detail = (detail + "; " if detail else "") + (msg[-1] if msg else "error")
    passed = report.passed and not report.skipped
    prev = _OUTCOMES.get(number)
    if prev is not None:
        # several tests may share a criterion; any failure fails it
        passed = passed and prev[1]
        detail = "; ".join(d for d in (prev[2], detail) if d)
    _OUTCOMES[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, passed, detail = _OUTCOMES[number]
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
