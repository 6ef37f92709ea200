"""
Shared fixtures for the tinysr-search test suite
The scripts directory is flat, so it goes on sys.path like run.py does.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from search_space import GENERATOR, IDENTITY_INDEX, SearchSpace, chain_genome, make_genome  # noqa: E402
from sr_data import DatasetSpec, generate_dataset  # noqa: E402

CONV1, CONV3 = 0, 1


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def skeleton_genome():
    """Every node is Identity: the cost of the fixed skeleton alone"""
    return chain_genome(IDENTITY_INDEX)


@pytest.fixture
def conv3_chain():
    return chain_genome(CONV3)


@pytest.fixture
def reduced_space():
    """3 nodes, 2 ops: 48 genomes"""
    return SearchSpace(GENERATOR, size=3, num_ops=2)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(DatasetSpec(seed=0, count_train=4, count_val=2, image_size=24, scale=2))


def random_generator_genome(rng: np.random.Generator, space: SearchSpace = SearchSpace(GENERATOR)):
    decisions = []
    for i in range(1, space.size + 1):
        decisions += [int(rng.integers(space.num_ops)), int(rng.integers(i))]
    return make_genome(space, decisions)
