import numpy as np
import pytest

from clustersched.vector_index import build_index
from clustersched.workload import synth_corpus


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(2000, 16, 20, 0.3, seed=3)


@pytest.fixture(scope="session")
def small_index(tmp_path_factory, small_corpus):
    return build_index(small_corpus, 20, tmp_path_factory.mktemp("small_index"), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def medium_corpus():
    return synth_corpus(10000, 64, 100, 0.3, seed=11)


@pytest.fixture(scope="session")
def medium_index(tmp_path_factory, medium_corpus):
    return build_index(medium_corpus, 100, tmp_path_factory.mktemp("medium_index"), seed=11)
