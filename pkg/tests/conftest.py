import numpy as np
import pytest

from impressood import datagen, inversion, smallnet


@pytest.fixture(scope="session")
def small_splits():
    return datagen.standard_splits(datagen.DatasetSpec(seed=3), 150, 50)


@pytest.fixture(scope="session")
def small_ckpt(small_splits):
    """Default architecture, briefly trained; enough for gradient and shape tests."""
    train, test = small_splits
    model = smallnet.build_model(smallnet.ArchConfig(), seed=3)
    return smallnet.train(model, train, smallnet.TrainConfig(epochs=4, seed=3), test)


@pytest.fixture(scope="session")
def small_inv_config():
    return inversion.InversionConfig(iterations=40, batch_size=8, samples_per_class=16, seed=5)


@pytest.fixture(scope="session")
def small_synthesis(small_ckpt, small_inv_config):
    return inversion.synthesize_all(small_ckpt, small_inv_config)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
