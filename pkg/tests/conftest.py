"""Collects acceptance results and prints one line per criterion at the end of the run."""

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return report
    n = marker.args[0]
    entry = item.config.stash[_RESULTS].setdefault(n, {"passed": True, "details": []})
    entry["passed"] &= report.passed
    details = [v for k, v in item.user_properties if k == "detail"]
    if report.failed:
        details.append(f"{item.name} failed")
    entry["details"].extend(details)
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        entry = results[n]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"[criterion {n}] {status}  " + "; ".join(entry["details"]))
