"""Prints one PASS/FAIL line per acceptance criterion after the run.

Acceptance tests are named ``test_cNN_<topic>``; a criterion passes when every
test carrying its number passed.
"""

import re

import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_c(\d+)_")
NAMES = {
    1: "loss oracles",
    2: "gradient checks",
    3: "endpoint identities",
    4: "contribution-weight contract",
    5: "flag mechanics",
    6: "SVCCA",
    7: "k-means",
    8: "BLEU",
    9: "low-resource gain over the multilingual baseline",
    10: "weights favour the family teacher-assistant",
    11: "reproducibility from the config snapshot",
}
_outcomes: dict[int, dict] = {}
_notes: list[str] = []


@pytest.fixture(scope="session")
def note():
    """Record a line of measured values to print under the criteria summary."""
    return _notes.append


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    entry = _outcomes.setdefault(int(m.group(1)), {"ok": True, "seen": False})
    if report.when == "call" or report.failed or report.skipped:
        entry["seen"] = True
        if not report.passed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {NAMES.get(n, '')}: {status}")
    for line in _notes:
        terminalreporter.write_line(f"  {line}")
