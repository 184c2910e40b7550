import re

_CRITERIA: dict[tuple[int, str], tuple[str, str]] = {}
_PATTERN = re.compile(r"test_criterion_(\d+)([a-z]?)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    num, name = (int(m.group(1)), m.group(2)), m.group(3).replace("_", " ")
    failed = report.failed or (report.when == "call" and report.skipped)
    previous = _CRITERIA.get(num, (name, "PASS"))[1]
    if report.when == "call" or failed:
        status = "FAIL" if failed or previous == "FAIL" else "PASS"
        _CRITERIA[num] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, status = _CRITERIA[num]
        label = f"{num[0]}{num[1]}"
        terminalreporter.write_line(f"criterion {label:>3}: {status}  {name}")
