import numpy as np
import pytest

from vprdb import FrameVoxelSets

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    key = getattr(report, "_criterion", None)
    if key is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _ACCEPTANCE.setdefault(key, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcomes in sorted(_ACCEPTANCE.items()):
        if "failed" in outcomes:
            verdict = "FAIL"
        elif "passed" in outcomes:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"criterion {number:>2} {verdict:4} {title}")


def random_voxel_sets(rng, n_frames, n_voxels, min_size=1, max_size=40):
    """Frames drawing random subsets from a shared pool of voxel keys."""
    grid = np.stack(np.unravel_index(np.arange(n_voxels), (9, 9, 9)), axis=1) - 4
    pool = grid.astype(np.int64)
    sets = []
    for _ in range(n_frames):
        size = int(rng.integers(min_size, max_size + 1))
        pick = rng.choice(n_voxels, size=min(size, n_voxels), replace=False)
        sets.append(pool[pick])
    return FrameVoxelSets(tuple(sets))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
