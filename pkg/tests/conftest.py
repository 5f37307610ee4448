import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(key)
        if prev is None or prev == "PASS":
            _CRITERIA[key] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), outcome in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {n:2d} {name.replace('_', ' ')}: {outcome}")
