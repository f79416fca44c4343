import numpy as np
import pytest
import torch

from voxvid.fixture import make_moving_sphere_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 frames x 3 views at 16 px; enough for loader and ray tests."""
    root = tmp_path_factory.mktemp("tiny") / "sphere"
    return make_moving_sphere_dataset(root, n_frames=4, n_views=3, size=16)


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """The full moving-sphere fixture: 8 views x 4 frames x 64 px."""
    root = tmp_path_factory.mktemp("fixture") / "sphere"
    return make_moving_sphere_dataset(root, n_frames=4, n_views=8, size=64)


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)
