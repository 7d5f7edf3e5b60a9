import pytest

CRITERIA = {
    1: "certified-by-construction bound and monotone decay",
    2: "energy-preservation exactness and rejection",
    3: "baseline identifiability",
    4: "stable learner fidelity on u1/u2",
    5: "noise robustness, bounded w1/w2, divergence flagged",
    6: "Burgers rank-9 POD energy",
    7: "Burgers end to end",
    8: "gradient vs finite differences",
    9: "derivative stencil order",
    10: "generalized-Q round trip",
}

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _results[number] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        if number not in _results:
            terminalreporter.write_line(f"criterion {number:2d} NOT RUN  {title}")
            continue
        passed, detail = _results[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {status:7s} {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
