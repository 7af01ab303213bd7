from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_notes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")


@pytest.fixture
def criterion_note(request):
    """Record a measured value to print under the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    key = marker.args[0] if marker else None
    return lambda text: _notes[key].append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    expected_failure = hasattr(report, "wasxfail")
    if report.when == "call" or (report.failed and not expected_failure):
        passed = report.passed and not expected_failure
        _outcomes[marker.args[0]].append((item.name, passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        verdict = "PASS" if all(ok for _, ok, _ in results) else "FAIL"
        seconds = sum(d for _, _, d in results)
        failing = [name for name, ok, _ in results if not ok]
        detail = f"; failing: {', '.join(failing)}" if failing else ""
        terminalreporter.write_line(f"criterion {n}: {verdict} ({len(results)} checks, {seconds:.0f} s{detail})")
        for text in _notes.get(n, []):
            terminalreporter.write_line(f"    {text}")
