import time

import numpy as np
import pytest

from llprot.harness import BlobSpec, ExperimentConfig, sweep
from llprot.trainer import TrainConfig

# 3-class blobs in 10 dimensions, 250 per class: an 80/20 split gives 600/150
SWEEP_BLOBS = BlobSpec(num_classes=3, per_class=250, dim=10, spread=1.0, center_scale=1.5, seed=0)
SWEEP_BAG_SIZES = (1, 4, 16, 64, 150)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bag_size_sweep():
    cfg = ExperimentConfig(blobs=SWEEP_BLOBS, bag_sizes=SWEEP_BAG_SIZES, train=TrainConfig(epochs=100),
                           batch_instances=32, seed=0)
    t0 = time.perf_counter()
    rows = sweep(cfg)
    table = {(r["loss"], r["bag_size"]): r for r in rows}
    return table, time.perf_counter() - t0
