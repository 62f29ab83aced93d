import numpy as np
import pytest

from spikedrf.model import ExperimentConfig, VocabularySpec
from spikedrf.quadrature import cached_rule


@pytest.fixture(scope="session")
def rule127():
    return cached_rule(127)


@pytest.fixture(scope="session")
def rule201():
    return cached_rule(201)


@pytest.fixture()
def tiny_config():
    return ExperimentConfig(
        d=60,
        p=90,
        n=48,
        n0=200,
        eta_tilde=1.0,
        lam=0.1,
        seed=1234,
        activation="tanh",
        link="sin",
        vocab=VocabularySpec(zeta=(1.0,), pi=(1.0,)),
    )


def seed_rng(seed=0):
    return np.random.default_rng(seed)
