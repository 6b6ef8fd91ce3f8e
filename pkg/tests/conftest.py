from __future__ import annotations

import numpy as np
import pytest

from geocorr.data import DataConfig, build_dataset
from geocorr.geometry import SamplingPolicy
from geocorr.language import Grammar
from geocorr.model import ModelConfig
from geocorr.scenegen import RenderSettings, SceneSpec


def tiny_data_config(num_train: int = 4, num_test: int = 3, seed: int = 0) -> DataConfig:
    """32x32 images, 8x8 patches, 4-frame sequences: fast enough for unit tests."""
    return DataConfig(
        num_train=num_train,
        num_test=num_test,
        clip_length=8,
        seed=seed,
        fine_grid=(12, 12),
        coarse_grid=(4, 4),
        scene=SceneSpec(points_per_surface=3000, feature_dim=16),
        render=RenderSettings(image_size=(32, 32), patch_grid=(8, 8), focal=50.0),
        policy=SamplingPolicy(window_radius=4, seq_len_range=(4, 4), margin=2.0),
        grammar=Grammar(vocab_size=16, length=8),
    )


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        num_layers=2,
        hidden_dim=32,
        num_heads=2,
        emb_dim=8,
        lora_rank=4,
        head_layers=(1, 2),
        vocab_size=16,
        max_frames=4,
        patches_per_frame=64,
        feature_dim=16,
        max_text_len=8,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(tiny_data_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
