import numpy as np
import pytest

from splatsim import kernels
from splatsim.render import rgb_to_sh_dc
from splatsim.scene_io import SH_COEFFS, Camera, GaussianScene


def make_scene(means, scales=0.1, quats=None, opacity=0.9, colors=(1.0, 1.0, 1.0), object_ids=None):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n = len(means)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
    if quats is None:
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacity = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)))
    return GaussianScene(means, np.log(scales), np.asarray(quats, dtype=np.float64),
                         np.log(opacity / (1 - opacity)), sh, object_ids)


def axis_camera(width=32, height=24, focal=30.0, name="cam", mask=None):
    """Camera at the origin looking down +z (world frame = camera frame)."""
    return Camera(name, focal, focal, width / 2.0, height / 2.0, width, height, np.eye(4), mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    from splatsim.synthetic import write_dataset

    root = tmp_path_factory.mktemp("synthetic")
    config = write_dataset(root, n_per_ball=2000, n_views=8)
    return config


# --- acceptance reporting ---------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL line each in
# the terminal summary; notes added through the ``notes`` fixture are appended.

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def notes(request):
    items = []
    request.node.criterion_notes = items
    return items


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    # the call phase decides; a broken fixture (setup failure) also counts as FAIL
    if marker is None or not (report.when == "call" or (report.when == "setup" and not report.passed)):
        return
    number, title = marker.args
    status = "PASS" if report.passed else "FAIL"
    detail = "; ".join(getattr(item, "criterion_notes", []))
    ACCEPTANCE_RESULTS[number] = f"criterion {number} {status}: {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
