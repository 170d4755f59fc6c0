"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_verdicts = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call" or failed:
        previous = _verdicts.get(name, True)
        _verdicts[name] = previous and not failed


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _verdicts.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
