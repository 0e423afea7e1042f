import numpy as np
import pytest
import torch
from hypothesis import settings

from egosynth.diffusion import TrainConfig, default_schedule, encode_condition, map_center, train_denoiser
from egosynth.maps import MapSpec, generate_map
from egosynth.toydata import RolloutConfig, build_toy_dataset

settings.register_profile("egosynth", max_examples=60, deadline=None)
settings.load_profile("egosynth")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_map():
    return generate_map(0, MapSpec(width_m=100.0, height_m=100.0, n_straight=2, n_curved=0), map_id="small")


@pytest.fixture(scope="session")
def tiny_model(small_map):
    """A quickly trained denoiser over short 5-agent rollouts (T=10, K=20)."""
    rc = RolloutConfig(M=5, T=10, spawn_radius=30.0)
    spec = MapSpec(width_m=100.0, height_m=100.0, n_straight=2, n_curved=0)
    scenes = build_toy_dataset([small_map], spec, 24, seed=1, cfg=rc)
    feat = encode_condition(small_map, map_center(small_map))
    res = train_denoiser(scenes, [feat] * len(scenes),
                         TrainConfig(steps=150, batch_size=8, lr=1e-3, hidden=32, emb=16, probe_size=16),
                         default_schedule(20))
    return res, feat, scenes
