"""
Shared pytest configuration for the Telescope Anomaly Toolkit tests
"""

import numpy as np
import pytest

from modules.detector import DetectorConfig
from modules.synthgen import AnomalySpec, NoiseSpec, build_factor_model, synthesize_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-scale reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale reproduction, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    """50 streams, 2 trends, short-memory noise and a strong 40-tick anomaly on streams 0-2"""
    model = build_factor_model(50, k=2, noise=NoiseSpec(hurst=0.5, variance=1.0), seed=7,
                               amplitude=3.0, periods=(50, 80))
    spec = AnomalySpec(snr=8.0, duration_ticks=40, start_tick=1500, streams=(0, 1, 2))
    return synthesize_dataset(model, spec, T=2000, seed=11, warmup_len=1000)


@pytest.fixture
def small_config():
    return DetectorConfig(lambda_=1e-3, lambda_mu=1e-2, lambda_sigma=1e-3, eta=1e-5,
                          control_limit=5.0, reg_guard=4.0, warmup_len=1000, n_components=2)
