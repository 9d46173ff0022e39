import numpy as np
import pytest

from vidlane.config import RunConfig
from vidlane.model import LaneNet
from vidlane.synthgen import SceneConfig, generate_dataset
from vidlane.train import fit_basis

TINY = dict(height=48, width=80, channels=8, heads=2, basis_k=3, epochs=1, lr=1e-3)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(3, SceneConfig(frames=8, height=48, width=80), seed=4)


@pytest.fixture
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture
def tiny_net(tiny_data, tiny_cfg):
    net = LaneNet.init(tiny_cfg, fit_basis(tiny_data, tiny_cfg))
    r = np.random.Generator(np.random.PCG64(99))
    for p in net.parameters().values():  # move away from the near-zero initial state
        p.data += r.normal(0, 0.05, p.shape)
    return net


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
