"""Prints one PASS/FAIL line per acceptance criterion after the run."""

_results = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1]
        _results.append((name, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _results:
        terminalreporter.write_line(f"{status} {name} {detail}".rstrip())
