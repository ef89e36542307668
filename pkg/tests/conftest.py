import numpy as np
import pytest

from dragsaw.dataio import SyntheticConfig, generate_synthetic
from dragsaw.trainer import default_test_synth


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 train / 4 test samples at 32x32 for fast trainer/CLI tests."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = SyntheticConfig(count=16, size=32, seed=7)
    train_m = generate_synthetic(cfg, root / "train", split="train")
    test_m = generate_synthetic(default_test_synth(cfg), root / "test", split="test")
    return root, train_m, test_m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
