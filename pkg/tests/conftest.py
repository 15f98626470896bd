"""Core test fixtures for finegrid tests."""

import numpy as np
import pytest

from finegrid.config import (
    DataConfig,
    EvalConfig,
    ModelConfig,
    PretrainConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
)
from finegrid.grid import FlowData, FlowGrid, Granularity, coarsen, synth_data
from finegrid.tensor import precision

# ============================================================================
# Environment Fixtures
# ============================================================================


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Keep XDG data and log directories inside the test's tmp dir."""
    monkeypatch.setenv("XDG_STATE_HOME", str(tmp_path / "state"))
    monkeypatch.setenv("XDG_DATA_HOME", str(tmp_path / "data"))


@pytest.fixture
def f64():
    """Run the test body in 64-bit precision."""
    with precision(64):
        yield


@pytest.fixture
def rng():
    """Fixed-seed generator."""
    return np.random.default_rng(1234)


# ============================================================================
# Config Fixtures
# ============================================================================


@pytest.fixture
def tiny_model_cfg():
    """Smallest model that still has every branch."""
    return ModelConfig(channels=4, heads=2, city_blocks=1, neighborhood_layers=1)


@pytest.fixture
def tiny_data_cfg():
    """Four days of 4x4 coarse / 8x8 fine frames with 12 slots per day."""
    return DataConfig(height=4, width=4, upscale=2, frames=48, slots_per_day=12, blobs=2,
                      blob_width=1.2, peak=10.0, noise=0.3, seed=3)


@pytest.fixture
def tiny_sampler_cfg():
    return SamplerConfig(k=3, threshold_mode="percentile", percentile=0.3)


@pytest.fixture
def tiny_pretrain_cfg(tiny_sampler_cfg):
    cfg = PretrainConfig(epochs=2, batch_size=4, lr=1e-2, max_city_anchors=16,
                         frames_per_epoch=8)
    cfg.sampler = tiny_sampler_cfg
    return cfg


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(epochs=2, batch_size=8, lr=1e-2)


@pytest.fixture
def tiny_run_cfg(tiny_data_cfg, tiny_sampler_cfg, tiny_model_cfg):
    """A RunConfig sized for seconds-long CLI runs."""
    return RunConfig(
        data=tiny_data_cfg,
        sampler=tiny_sampler_cfg,
        model=tiny_model_cfg,
        pretrain=PretrainConfig(epochs=2, batch_size=4, lr=1e-2, max_city_anchors=16,
                                frames_per_epoch=8),
        train=TrainConfig(epochs=2, batch_size=8, lr=1e-2),
        eval=EvalConfig(),
    )


# ============================================================================
# Data Fixtures
# ============================================================================


@pytest.fixture
def tiny_data(tiny_data_cfg) -> FlowData:
    """Synthetic tiny dataset split 0.7 / 0.1 / 0.2."""
    return synth_data(tiny_data_cfg)


@pytest.fixture
def fine_grid(rng) -> FlowGrid:
    """Random integer-valued 6 x 4 x 4 fine grid."""
    values = rng.integers(0, 10, size=(6, 4, 4)).astype(np.float64)
    return FlowGrid.from_frames(values, Granularity.FINE, 2, 3)


@pytest.fixture
def coarse_grid(fine_grid) -> FlowGrid:
    return coarsen(fine_grid)
