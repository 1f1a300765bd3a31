"""Shared fixtures: synthetic backbones at two scales and a real image pair.

The trained-checkpoint path needs no network access; tests run against
synthetic backbones of the same architecture (calibrated toward trained
feature statistics, see ``synthetic_backbone_archive``), which exercise
every code path and keep runtimes desk-sized.  The heavy 300-iteration
training runs are session fixtures shared by several tests.
"""

import time

import numpy as np
import pytest
import skimage.data
import skimage.transform
import torch

import semtransfer as st

SMALL = dict(num_layers=12, embed_dim=32, num_heads=2, patch_size=8, grid_size=28)
TOY = dict(num_layers=2, embed_dim=8, num_heads=2, patch_size=8, grid_size=3)


@pytest.fixture(scope="session")
def small_archive():
    return st.synthetic_backbone_archive(**SMALL, seed=0, calibrated=True)


@pytest.fixture(scope="session")
def small_backbone(small_archive):
    return st.load_backbone(small_archive)


@pytest.fixture(scope="session")
def toy_backbone():
    return st.load_backbone(st.synthetic_backbone_archive(**TOY, seed=1))


def _to_tensor(arr, side=128):
    small = skimage.transform.resize(arr, (side, side), anti_aliasing=True)
    return torch.from_numpy(np.ascontiguousarray(small.transpose(2, 0, 1))).float().clamp(0, 1)


@pytest.fixture(scope="session")
def desk_pair():
    """One in-the-wild structure/appearance pair at 128x128."""
    return _to_tensor(skimage.data.astronaut()), _to_tensor(skimage.data.coffee())


def desk_train_config(**overrides):
    base = dict(total_iterations=300, seed=0, deterministic=True,
                checkpoint_period=0, log_period=0)
    base.update(overrides)
    return st.TrainConfig(**base)


def run_desk_training(backbone, pair, run_dir, **overrides):
    s_img, t_img = pair
    config = desk_train_config(**overrides)
    return st.train(s_img, t_img, config, backbone, run_dir)


@pytest.fixture(scope="session")
def desk_run(small_backbone, desk_pair, tmp_path_factory):
    """The 300-iteration default-config training run (shared)."""
    run_dir = tmp_path_factory.mktemp("desk_run")
    start = time.perf_counter()
    result = run_desk_training(small_backbone, desk_pair, run_dir)
    result.train_seconds = time.perf_counter() - start
    return result


@pytest.fixture(scope="session")
def desk_run_repeat(small_backbone, desk_pair, tmp_path_factory):
    """Same config and seed as desk_run, fresh state; for determinism checks."""
    run_dir = tmp_path_factory.mktemp("desk_run_repeat")
    result = run_desk_training(small_backbone, desk_pair, run_dir)
    return result


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
