from __future__ import annotations

import pytest

ACCEPTANCE_FILE = "test_acceptance.py"


@pytest.fixture
def criterion(request):
    """Record a one-line acceptance result: criterion(n, passed, detail)."""

    def record(number: int, passed: bool, detail: str) -> bool:
        request.node.user_properties.append(("criterion", (number, bool(passed), detail)))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if ACCEPTANCE_FILE not in getattr(rep, "nodeid", "") or rep.when != "call" and key != "error":
                continue
            recorded = [v for k, v in rep.user_properties if k == "criterion"]
            if recorded:
                rows.extend(recorded)
            else:
                rows.append((None, key == "passed", f"{rep.nodeid.split('::')[-1]} ({key}, no result recorded)"))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(rows, key=lambda r: (r[0] is None, r[0] or 0)):
        tag = f"criterion {number}" if number is not None else "criterion ?"
        terminalreporter.write_line(f"{tag}: {'PASS' if passed else 'FAIL'}  {detail}")
