import numpy as np
import pytest

from phantom_gen import PhantomSpec, generate_dataset
from run_config import build_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """32^3 phantoms: octant extent 16, short thin tubes"""
    return PhantomSpec(dims=(32, 32, 32), seed=3, appendix_radius_normal=1.0, appendix_radius_inflamed=2.0,
                       appendix_length=8, caecum_radius=3.0, intensity_delta=0.25, noise_sigma=0.02,
                       distractor_count=1)


@pytest.fixture
def tiny_config(tmp_path):
    return build_config({
        "seed": 5,
        "output_dir": str(tmp_path / "runs"),
        "phantom": {"dims": [32, 32, 32], "appendix_radius_normal": 1.0, "appendix_radius_inflamed": 2.0,
                    "appendix_length": 8, "caecum_radius": 3.0, "noise_sigma": 0.02, "distractor_count": 1},
        "data": {"n": 6, "positive_fraction": 0.5, "folds": 2},
        "rl": {"window_edge": 7, "max_steps": 20, "tail_k": 4, "num_envs": 2, "n_step": 3,
               "iterations": 4, "eval_every": 2},
        "clf": {"patch_edge": 15, "epochs": 2, "micro_batch": 4},
        "fcn": {"upsample": 2},
        "rle": {"neighborhood": [8, 8, 8]},
    })


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    return generate_dataset(tiny_spec, n=6, positive_fraction=0.5, folds=2, seed=3, out_dir=tmp_path / "data")
