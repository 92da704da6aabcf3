import re

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        if n not in _ACCEPTANCE or status != "PASS":
            _ACCEPTANCE[n] = (m.group(2).replace("_", " "), status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, status, detail = _ACCEPTANCE[n]
        line = f"criterion {n}: {status}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
