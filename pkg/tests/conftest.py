import numpy as np
import pytest

from spmap.geometry import fit_path, synthetic_road


def circle_waypoints(R=100.0, n=200):
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([R * np.cos(th), R * np.sin(th)])


@pytest.fixture(scope="session")
def road():
    return fit_path(synthetic_road(), 40, 6)


@pytest.fixture(scope="session")
def circle():
    return fit_path(circle_waypoints(), 8, 6, closed=True)


@pytest.fixture(scope="session")
def line():
    wp = np.column_stack([np.linspace(0.0, 10.0, 8), np.zeros(8)])
    return fit_path(wp, 2, 3)


# -- acceptance report ------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    """Register the running test as an acceptance criterion; returns a dict for details."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    entry = {"number": number, "title": title, "details": [], "outcome": "FAIL"}
    _CRITERIA[request.node.nodeid] = entry
    return entry


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _CRITERIA.get(item.nodeid)
    if entry is not None and rep.when == "call":
        entry["outcome"] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for entry in sorted(_CRITERIA.values(), key=lambda e: e["number"]):
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"{entry['outcome']} criterion {entry['number']:>2}: {entry['title']}"
                                    + (f" [{detail}]" if detail else ""))
