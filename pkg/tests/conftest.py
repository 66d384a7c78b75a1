import numpy as np
import pytest
import torch

from stutterdet.backbone import toy_backbone
from stutterdet.synthetic import SyntheticSpeech

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def backbone():
    return toy_backbone(0, 2, 8)


@pytest.fixture(scope="session")
def speech():
    return SyntheticSpeech(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
