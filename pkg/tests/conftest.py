import numpy as np
import pytest
import torch

from umdr.data import generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 classes, 4 train / 2 val samples per class, 8 frames of 16x16."""
    root = tmp_path_factory.mktemp("ds_small")
    generate_synthetic_dataset(str(root), num_classes=4, n_per_class=4, T=8, H=16, W=16, seed=3,
                               n_val_per_class=2)
    return str(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
