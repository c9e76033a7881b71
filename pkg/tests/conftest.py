from __future__ import annotations

import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))

from reges.corpus import load_catalog  # noqa: E402

_criteria: dict[int, dict] = {}


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def catalog():
    return load_catalog(FIXTURES / "catalog.jsonl")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "ran": False, "skipped": 0})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            entry["skipped"] += 1
        else:
            entry["ran"] = True
            entry["failed"] |= report.failed
    elif report.failed:
        entry["failed"] = True


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "FAIL" if entry["failed"] else ("PASS" if entry["ran"] else "SKIP")
        note = f" ({entry['skipped']} optional check(s) skipped)" if entry["skipped"] and entry["ran"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{note}")
