import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numerics as nm  # noqa: E402
from config import RunConfig  # noqa: E402
from synth_constructor import generate_synthetic_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def float64_numerics():
    nm.set_default_dtype("float64")
    yield
    nm.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """64x32 frames with 16x16 patches (n = 8), D = 8, one backbone layer, batch of 4 ids x 2."""
    config = RunConfig()
    config.update({
        "data": {"height": 64, "width": 32, "flip_probability": 0.5, "erase_probability": 0.5},
        "backbone": {"D": 8, "layers": 1, "heads": 2, "T": 2, "patch": 16, "stride": 16},
        "tcss": {"shift": 3, "groups": 2},
        "train": {"epochs": 2, "batch": 8, "P_ids": 4, "K_instances": 2, "warmup_epochs": 1, "T": 2,
                  "steps_per_epoch": 1, "eval_interval": 1, "base_lr": 0.01},
        "eval": {"max_rank": 4, "batch_size": 8},
    })
    return config.validate()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    dataset, manifest = generate_synthetic_dataset(num_ids=4, cams=2, tracklets_per_id_cam=2,
                                                   frames_per_tracklet=4, H=64, W=32, seed=3, out_dir=str(root))
    return str(root), manifest


@pytest.fixture
def synth_dataset():
    dataset, _ = generate_synthetic_dataset(num_ids=4, cams=2, tracklets_per_id_cam=2, frames_per_tracklet=4,
                                            H=64, W=32, seed=3)
    return dataset
