"""Collects acceptance outcomes and prints one line per criterion after the run."""

import pytest

_RESULTS = {}  # number -> {"title", "outcomes", "details", "missing"}


def _entry(item):
    number, title = item.get_closest_marker("criterion").args
    return _RESULTS.setdefault(number, {"title": title, "outcomes": [], "details": [], "missing": 0})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_deselected(items):
    for item in items:
        if item.get_closest_marker("criterion") is not None:
            _entry(item)["missing"] += 1


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.get_closest_marker("criterion") is None:
        return
    entry = _entry(item)
    if report.skipped:
        entry["missing"] += 1
    elif report.when == "call" or (report.when == "setup" and report.failed):
        entry["outcomes"].append(report.passed)
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        if not all(entry["outcomes"]):
            status = "FAIL"
        elif entry["missing"] or not entry["outcomes"]:
            status = "INCOMPLETE"
        else:
            status = "PASS"
        detail = "; ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
