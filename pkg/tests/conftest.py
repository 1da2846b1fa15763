from __future__ import annotations

import pytest

_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else detail
        _CRITERIA.setdefault(mark.args[0], []).append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        for name, outcome, detail in _CRITERIA[k]:
            word = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
            tr.write_line(f"criterion {k:2d} {word}  {name}  {detail}".rstrip())
