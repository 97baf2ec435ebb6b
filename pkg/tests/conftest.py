import numpy as np
import pytest

from bmploop.synthetic_world import WorldConfig, make_dataset

# Overlap-heavy bin mix used by the calibrated simulation properties.
CROWDED_BINS = (0.15, 0.03, 0.04, 0.05, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10,
                0.10, 0.08, 0.05, 0.03, 0.02, 0.0, 0.0, 0.0, 0.0, 0.0)


def crowded_world() -> WorldConfig:
    return WorldConfig(n_people=(2, 3), iou_bin_weights=CROWDED_BINS)


@pytest.fixture(scope="session")
def small_dataset():
    """20 scenes with complete GT; shared across read-only tests."""
    scenes, complete, _ = make_dataset(crowded_world(), 20, seed=1000)
    return scenes, complete


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
