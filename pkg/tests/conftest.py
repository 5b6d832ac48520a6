import numpy as np
import pytest

from msflow.counting import counters
from msflow.flow import LearnedField, SyntheticDataset, TrainSchedule, train_flow
from msflow.net import VelocityNet

GMM_TRAIN = dict(steps=10000, step_size=0.02, batch_size=256, seed=2)


@pytest.fixture(autouse=True)
def reset_counters():
    counters.reset()
    yield


@pytest.fixture(scope="session")
def gmm_dataset():
    return SyntheticDataset("gmm2d", seed=0)


@pytest.fixture(scope="session")
def gmm_net(gmm_dataset):
    """2-D mixture flow trained once per session; shared by solver tests."""
    net = VelocityNet([3, 64, 64, 64, 2], seed=1)
    train_flow(gmm_dataset, net, TrainSchedule(**GMM_TRAIN))
    return net


@pytest.fixture(scope="session")
def gmm_field(gmm_net):
    return LearnedField(gmm_net)


@pytest.fixture(scope="session")
def gmm_reference_cloud(gmm_dataset):
    """2000 direct draws from the mixture, the manifold-proximity reference."""
    return gmm_dataset.sample(2000, np.random.default_rng(12))
