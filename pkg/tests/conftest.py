import numpy as np
import pytest

from triplane_recon.field import Shape, TriplaneField, analytic_grid
from triplane_recon.isosurface import extract_mesh


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_field() -> TriplaneField:
    return TriplaneField.random(resolution=6, channels=4, hidden=(8, 8), seed=3, plane_scale=0.5)


@pytest.fixture(scope="session")
def sphere_mesh_64():
    return extract_mesh(analytic_grid(Shape("sphere", (0.5,)), 64))


# -- acceptance summary ----------------------------------------------------------------

_CRITERIA: dict[str, tuple[str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and item.function.__doc__:
        label = item.function.__doc__.strip().splitlines()[0]
        if report.when == "call" or (report.when == "setup" and report.failed):
            status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            _CRITERIA[label] = (status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, (status, seconds) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"{status}  criterion {label}  ({seconds:.1f} s)")
