import warnings

import numpy as np
import pytest

from segforge.data import VolumeBundle
from segforge.net import NetworkPlan, instantiate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_plan():
    # two levels, 2D, tiny widths: fast enough for graph-level tests
    return NetworkPlan(dims=2, kernels=[(3, 3), (3, 3)], strides=[(2, 2)], channels=[4, 8],
                       in_channels=1, num_classes=3, norm="instance", patch_size=(16, 16), batch_size=2)


@pytest.fixture
def small_net(small_plan):
    return instantiate(small_plan, np.random.default_rng(0), dtype=np.float64)


def make_bundle(shape=(12, 12, 12), spacing=(1.0, 1.0, 1.0), seed=0, n_labels=2):
    r = np.random.default_rng(seed)
    image = r.uniform(0.1, 1.0, size=(1,) + tuple(shape)).astype(np.float32)
    labels = r.integers(0, n_labels + 1, size=shape).astype(np.uint16)
    names = {0: "background", **{i: f"s{i}" for i in range(1, n_labels + 1)}}
    return VolumeBundle(image, labels, spacing, names)


@pytest.fixture
def bundle():
    return make_bundle()


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# verdict lines collected by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
