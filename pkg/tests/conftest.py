import numpy as np
import pytest

from mdnet import synthwarp as sw


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic corpus shared by training-mechanics tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    sw.generate_corpus(root, count=8, size=160, seed=101)
    return sw.Corpus(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
