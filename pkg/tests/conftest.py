import os

os.environ.setdefault("HANDCRAFT_QUIET", "1")

import numpy as np
import pytest

from cmlpe import CmlpeConfig
from posedata import make_toy_dataset, save_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_dataset():
    """4 classes x 5 clips, all in train."""
    return make_toy_dataset(num_classes=4, per_class=5, min_frames=20, max_frames=40, seed=7)


@pytest.fixture
def split_toy_dataset():
    """3 classes x 8 clips with test and val splits."""
    return make_toy_dataset(num_classes=3, per_class=8, min_frames=24, max_frames=40,
                            test_fraction=0.25, val_fraction=0.25, seed=11)


@pytest.fixture
def tiny_gen_config():
    return CmlpeConfig(num_classes=3, num_blocks=2, embed_dim=4, batch_size=4, train_steps=3)


@pytest.fixture
def toy_dir(tmp_path, split_toy_dataset):
    return save_dataset(split_toy_dataset, tmp_path / "toy")
