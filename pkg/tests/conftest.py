"""Acceptance bookkeeping: one pass/fail line per criterion in the terminal summary."""
import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = _RESULTS.setdefault(mark.args[0], {"passed": 0, "failed": 0, "details": []})
    entry["passed" if rep.passed else "failed"] += 1
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        status = "PASS" if e["failed"] == 0 else "FAIL"
        detail = "; ".join(e["details"])
        tr.write_line(f"criterion {n:>2}: {status}  ({e['passed']} passed, "
                      f"{e['failed']} failed)  {detail}")
