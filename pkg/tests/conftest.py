import re

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n, label = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or report.outcome != "passed":
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if outcome == "FAIL" or n not in _CRITERIA:
            _CRITERIA[n] = (outcome, label)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, label = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {label}")
