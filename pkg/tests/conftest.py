import numpy as np
import pytest
import torch

from patternmark import data, models


TOY_GEOMETRY = {"message_bits": 8, "pattern_size": 16, "image_size": 32,
                "canvas_size": 48, "locator_size": 32}

TOY_MODELS = {
    "processor": {"message_bits": 8, "pattern_size": 16},
    "encoder": {"base": 4, "levels": 2},
    "locator": {"variant": "light", "size": 32},
    "decoder": {"base": 4, "levels": 2},
    "extractor": {"message_bits": 8, "depths": [1, 1], "dims": [8, 16]},
}


@pytest.fixture
def toy_handles():
    torch.manual_seed(0)
    return models.build_all(TOY_MODELS)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    data.make_synthetic_dataset(root, n=8, size=32, seed=0)
    return data.ImageFolder(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
