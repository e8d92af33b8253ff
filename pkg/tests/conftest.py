"""Collects per-criterion outcomes from tests marked ``criterion(n, title)`` and
prints one PASS/FAIL line per criterion at the end of the run."""
from collections import OrderedDict

import pytest

_results: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    if report.when == "call" or report.failed or report.skipped:
        if report.when == "call":
            entry["ran"] = True
        if report.failed or report.skipped:
            entry["ok"] = False
        for key, value in item.user_properties:
            if key == "measured" and report.when == "call":
                entry["notes"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n} {status}: {e['title']}{notes}")
