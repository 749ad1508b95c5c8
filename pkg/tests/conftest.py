import numpy as np
import pytest
import torch

from anchorcfd.data import GeneratorConfig, fit_normalization, generate_synthetic


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # Deterministic CPU kernels; the bitwise-equality tests depend on it.
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_config():
    return GeneratorConfig(num_geometry=300, num_surface=400, num_volume=500)


@pytest.fixture(scope="session")
def tiny_sample(tiny_config):
    sample, flow = generate_synthetic(tiny_config, seed=11)
    return sample, flow


@pytest.fixture(scope="session")
def tiny_stats(tiny_sample):
    sample, _ = tiny_sample
    return fit_normalization([sample])


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
