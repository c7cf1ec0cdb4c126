import numpy as np
import pytest

from lfmamba.tensor import set_default_dtype

CRITERIA = {
    1: "scan equivalence",
    2: "ZOH golden values",
    3: "geometry round trips",
    4: "ESS2D identity and parameter ratio",
    5: "gradient suite",
    6: "budget match",
    7: "shape contracts",
    8: "desk-scale learning",
    9: "ensemble identity",
    10: "metric goldens",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture(autouse=True)
def _float64_default():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = _CRITERION_OF.get(report.nodeid)
    if n is not None:
        _outcomes.setdefault(n, []).append(report.outcome == "passed")


_CRITERION_OF: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERION_OF[item.nodeid] = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_OF:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} [{name}]: {status} ({len(results or [])} checks)")
