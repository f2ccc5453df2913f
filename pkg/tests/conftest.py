import numpy as np
import pytest
from hypothesis import settings

from tmslab.policy import Policy, Vocab
from tmslab.tasks import lab_vocab

settings.register_profile("lab", deadline=None, max_examples=60)
settings.load_profile("lab")


@pytest.fixture
def vocab():
    return lab_vocab()


@pytest.fixture
def toy3():
    return Vocab.toy(2)  # t0, t1, <eos>


def random_policy(vocab, order, seed, scale=1.0):
    return Policy.random(vocab, order, np.random.default_rng(seed), scale)
