import re

import pytest

TITLES = {
    1: "degenerate IMM equals ESKF-R",
    2: "zero-noise rolling consistency",
    3: "slippery ordering IMM-PO < ESKF-R < ESKF-PC",
    4: "slip-mode responsiveness",
    5: "ESKF-L worse than IMM-PO",
    6: "Jacobian finite-difference suite",
    7: "probability and covariance invariants",
    8: "runtime ratios",
    9: "metric correctness",
    10: "stability diagnostic",
    11: "sweep determinism",
}

_outcomes = {}
_details = {}


def _criterion(item):
    m = re.match(r"test_criterion_(\d+)", item.name)
    return int(m.group(1)) if m else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = _criterion(item)
    if n is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(n, []).append(rep.passed)
        for key, value in item.user_properties:
            if key == "detail":
                _details.setdefault(n, []).append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(TITLES):
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        detail = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n:2d} {status}  {TITLES[n]}" + (f"  [{detail}]" if detail else ""))
