import numpy as np
import pytest
import torch

from vaeloc.data import SyntheticConfig, generate_synthetic_normal, normalize_dataset
from vaeloc.model import VAE, ModelConfig
from vaeloc.trainer import TrainConfig, train

# criterion lines collected by test_acceptance.py and echoed in the summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_model():
    """8x8 input, latent 4, float64."""
    cfg = ModelConfig(image_size=8, latent_dim=4, encoder_channels=[4, 8])
    return VAE(cfg, seed=3).double()


@pytest.fixture
def tiny_image():
    rng = np.random.default_rng(11)
    return torch.as_tensor(rng.normal(size=(1, 1, 8, 8)))


@pytest.fixture(scope="session")
def toy_data():
    raw = generate_synthetic_normal(SyntheticConfig(n_images=256, image_size=16, seed=0))
    batch, stats = normalize_dataset(raw)
    return batch, stats


@pytest.fixture(scope="session")
def trained_toy(toy_data):
    """Small model trained briefly on 16x16 blobs (float32)."""
    batch, _ = toy_data
    cfg = ModelConfig(image_size=16, latent_dim=8, encoder_channels=[8, 16])
    return train(cfg, batch, TrainConfig(epochs=15, batch_size=32, learning_rate=1e-3, seed=0)).model
