import numpy as np
import pytest

from lesionxai.phantom import PhantomConfig, generate_phantom, preprocess
from lesionxai.unet import TrainConfig, UNetConfig, build_unet, train


@pytest.fixture(scope="session")
def small_phantoms():
    cfg = PhantomConfig(extent=32)
    return [generate_phantom(cfg, seed) for seed in range(4)]


@pytest.fixture(scope="session")
def small_model(small_phantoms):
    """A quickly trained toy network, good enough for detection on the
    training phantoms; shared by saliency / experiment / CLI tests."""
    dataset = [
        (preprocess(p), p.gt_mask.astype(np.float32), p.instances)
        for p in small_phantoms[:3]
    ]
    graph = build_unet(UNetConfig(depth=2, base_channels=8, patch_extent=32), seed=0)
    result = train(
        graph,
        dataset,
        TrainConfig(epochs=10, learning_rate=0.5, seed=0, patches_per_volume=2),
    )
    return result.graph


@pytest.fixture(scope="session")
def unet_config():
    return UNetConfig(depth=2, base_channels=8, patch_extent=32)
