"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

# criterion number -> {"title", "detail", "outcome"}; filled by test_acceptance
ACCEPTANCE = {}

_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    entry = ACCEPTANCE.setdefault(int(m.group(1)), {})
    if entry.get("outcome") != "failed":
        entry["outcome"] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        status = {"passed": "PASS", "failed": "FAIL"}.get(e.get("outcome"), "NOT RUN")
        line = f"[{status}] criterion {n:2d}: {e.get('title', '')}"
        if e.get("detail"):
            line += f" | {e['detail']}"
        terminalreporter.write_line(line)
