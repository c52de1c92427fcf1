"""Shared pytest plumbing.

After a run that included the acceptance gate, print its one-line-per-
criterion verdict table, even though per-test stdout is captured.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "CRITERIA", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(results):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {num:2d}: {name} ({detail})")
