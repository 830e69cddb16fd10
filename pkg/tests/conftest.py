import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_verdicts: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.failed:
        _verdicts[n] = ("FAIL", detail or report.when + " failed")
    elif report.skipped:
        _verdicts[n] = ("SKIP", detail)
    elif report.when == "call":
        _verdicts[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        status, detail = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
