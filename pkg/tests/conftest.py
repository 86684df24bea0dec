import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small but real dataset used by unit tests (not the acceptance runs)."""
    from refexp.shapeworld import make_dataset

    root = tmp_path_factory.mktemp("tinydata")
    make_dataset(str(root), 120, seed=2024, difficulty_mix="easy:0.5,medium:0.3,hard:0.2")
    return str(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
