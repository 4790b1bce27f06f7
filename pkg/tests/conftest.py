"""Shared fixtures: the synthetic dataset and the tiny trained model.

The trained checkpoint is expensive (~2000 optimization steps on CPU), so it
is cached under tests/_cache keyed by its exact configuration; delete that
directory or set LATENT_RELIGHT_TEST_RETRAIN=1 to force a fresh run.
"""

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from latent_relight import data as D
from latent_relight.model import ModelConfig, init_model
from latent_relight.train import TrainConfig, fit, load_checkpoint, model_from_checkpoint

DATASET_SPEC = D.SyntheticSceneSpec(
    n_scenes=40, n_lights=8, image_size=64, n_albedo_regions=6, ambient=0.25, seed=7
)
N_TRAIN_SCENES = 32

TINY_MODEL = dict(
    base_resolution=64,
    blocks_per_level=[1, 1, 1, 1],
    channels_per_level=[8, 16, 16, 32],
    seed=101,
)
# 32 scenes x 8 lights = 256 images -> 16 steps/epoch; 125 epochs = 2000 steps.
TINY_TRAIN = dict(
    batch_size=16,
    epochs=125,
    seed=202,
    eval_every=0,
    crop_ratio_min=0.2,
    crop_ratio_max=1.0,
)

CACHE_DIR = Path(__file__).parent / "_cache"


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "data"
    D.generate_synthetic_dataset(DATASET_SPEC, root)
    return root


@pytest.fixture(scope="session")
def all_scenes(dataset_root):
    return D.load_multi_illum(dataset_root)


@pytest.fixture(scope="session")
def train_scenes(all_scenes):
    return all_scenes[:N_TRAIN_SCENES]


@pytest.fixture(scope="session")
def holdout_scenes(all_scenes):
    return all_scenes[N_TRAIN_SCENES:]


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope="session")
def untrained_model(tiny_model_config):
    return init_model(tiny_model_config)


def _cache_key() -> str:
    payload = json.dumps(
        {
            "dataset": DATASET_SPEC.__dict__,
            "n_train": N_TRAIN_SCENES,
            "model": TINY_MODEL,
            "train": TINY_TRAIN,
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory, tiny_model_config, train_scenes):
    cached = CACHE_DIR / f"trained_{_cache_key()}.lrck"
    if cached.exists() and not os.environ.get("LATENT_RELIGHT_TEST_RETRAIN"):
        return load_checkpoint(cached)
    out_dir = tmp_path_factory.mktemp("train_run")
    config = TrainConfig(**TINY_TRAIN, out_dir=str(out_dir))
    final = fit(tiny_model_config, config, train_scenes)
    CACHE_DIR.mkdir(exist_ok=True)
    shutil.copyfile(out_dir / "checkpoint_final.lrck", cached)
    return final


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint):
    return model_from_checkpoint(trained_checkpoint)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
