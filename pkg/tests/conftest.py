import numpy as np
import pytest

from hybridpim import train
from hybridpim.nn import Conv2D, Dense, Flatten, MaxPool, Network, ReLU


@pytest.fixture(scope="session")
def tiny_splits():
    return train.make_dataset("cnn-tiny", 0)


@pytest.fixture(scope="session")
def tiny_net(tiny_splits):
    return train.train_toy(train.TrainConfig(preset="cnn-tiny", epochs=20), tiny_splits)


def random_net(seed=0, c_in=2, c_mid=3, hw=6, classes=4):
    """Small conv -> relu -> pool -> dense net with random weights."""
    rng = np.random.default_rng(seed)
    layers = [Conv2D(c_in, c_mid, 3, padding=1), ReLU(), MaxPool(2), Flatten(), Dense((hw // 2) ** 2 * c_mid, classes)]
    ws = [rng.normal(scale=0.5, size=layers[0].weight_shape), rng.normal(scale=0.5, size=layers[4].weight_shape)]
    return Network(layers, ws, (hw, hw, c_in))


_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    num, title = mark.args
    ok = call.excinfo is None
    prev = _CRITERIA.get(num, (title, True))
    _CRITERIA[num] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, ok = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}")
