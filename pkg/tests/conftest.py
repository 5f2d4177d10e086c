import numpy as np
import pytest

from kgscatter import evolution as ev
from kgscatter import geometry as geo
from kgscatter.grid_ops import SpatialGrid


@pytest.fixture(scope="session")
def grid32():
    return SpatialGrid(32, 40.0)


@pytest.fixture(scope="session")
def bump15(grid32):
    return geo.reduce(geo.preset("bump15"), grid32)


@pytest.fixture(scope="session")
def free32(grid32):
    return geo.reduce(geo.preset("free"), grid32)


@pytest.fixture(scope="session")
def short_slab():
    return ev.TimeGrid.build(5.0, 0.025, 1.5)


@pytest.fixture(scope="session")
def bump_bundle(bump15, short_slab):
    return ev.DiagonalizationBundle(bump15, short_slab)


@pytest.fixture(scope="session")
def bump_evolutions(bump15, short_slab, bump_bundle):
    return {flavor: ev.Evolution(bump15, short_slab, flavor, bump_bundle) for flavor in ("full", "ad", "diag")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary: one verdict line per criterion

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    number, title = mark
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": []})
    if hasattr(report, "wasxfail"):
        outcome = "xfail"
    elif report.skipped:
        outcome = "skipped"
    else:
        outcome = "passed" if report.passed else "failed"
    entry["outcomes"].append((report.nodeid.split("::")[-1], outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = [o for _, o in entry["outcomes"]]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        detail = ", ".join(f"{name} {o}" for name, o in entry["outcomes"] if o != "passed")
        line = f"C{number:<3} {verdict}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
