import numpy as np
import pytest

from petlkit.backbone import ArchConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_transformer():
    return ArchConfig("transformer", 16, 2, 2, ff_mult=2, max_seq=128)


@pytest.fixture
def small_conformer():
    return ArchConfig("conformer", 16, 2, 2, ff_mult=2, conv_kernel=3, max_seq=128)
