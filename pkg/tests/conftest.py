"""Collects per-criterion outcomes from tests marked ``criterion`` and prints one line each."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["notes"].extend(str(v) for k, v in item.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        line = f"criterion {number:>2}: {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["notes"]:
            line += "  [" + "; ".join(r["notes"]) + "]"
        terminalreporter.write_line(line)
