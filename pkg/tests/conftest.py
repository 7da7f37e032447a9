import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from cmlab.config import FeatTrainConfig, discs16_preset
from cmlab.discs import DiscGeometry, sample_dataset
from cmlab.features import train_features
from cmlab.transforms import specs_from_config


@pytest.fixture(scope="session")
def geom16() -> DiscGeometry:
    return DiscGeometry(resolution=16, radius=3.0, softness=0.75,
                        center_lo=5.0, center_hi=11.0)


@pytest.fixture(scope="session")
def geom32() -> DiscGeometry:
    return DiscGeometry()


@pytest.fixture(scope="session")
def discs16_data(geom16) -> torch.Tensor:
    return sample_dataset(512, np.random.default_rng(11), geom16)


@pytest.fixture(scope="session")
def fm_quick(discs16_data):
    """A briefly trained 16x16 feature net shared by metric/tangent tests.

    Not accurate enough for the regression acceptance gate; good enough for
    structural tests that need non-degenerate features.
    """
    cfg = discs16_preset()
    specs = specs_from_config(cfg.transforms, ["deg", "geo", "clr"], channels=1)
    train_cfg = FeatTrainConfig(batch=64, iters=500, channels=[8, 16, 32, 32],
                                fc_dim=64, log_every=250)
    fm, _ = train_features(discs16_data, specs, train_cfg, seed=5)
    return fm
