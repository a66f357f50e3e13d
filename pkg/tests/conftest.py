import numpy as np
import pytest

from app.schemas.config import ModelConfig, SyntheticSpec
from app.pipeline.model import init_model
from app.pipeline.synthetic import generate_synthetic
from app.tools.rng import Rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long end-to-end training reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_model_config():
    return ModelConfig(feature_hidden=6, latent_dims=(3, 3, 3), transmitted_dim=6,
                       fusion_hidden=8, receiver_latent_dim=4, decoder_hidden=6, disc_hidden=8)


@pytest.fixture
def small_spec():
    return SyntheticSpec(n_samples=210, dims=(5, 4, 3), rho=0.8, seed=3)


@pytest.fixture
def small_dataset(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture
def small_model(small_model_config, small_dataset):
    return init_model(small_model_config, small_dataset.dims, Rng(11))


@pytest.fixture
def small_batch(small_dataset):
    return small_dataset.subset(np.arange(14))
