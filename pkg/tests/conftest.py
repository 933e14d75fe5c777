import numpy as np
import pytest

from protopart.data import Dataset
from protopart.model import ConvBlock, ModelConfig, build_model

SMALL_BLOCKS = (ConvBlock(8, padding=1, pool=2),)


def blob_images(n_per_class, size=12, seed=0):
    """Two classes of Gaussian bumps at random positions: warm-coloured (0) and cool-coloured (1).

    Prototype similarity is taken as a max over positions, so the classes
    must differ in appearance rather than location.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    colours = [np.array([1.0, 0.5, 0.1]), np.array([0.1, 0.5, 1.0])]
    images, labels = [], []
    for label, colour in enumerate(colours):
        for _ in range(n_per_class):
            cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8) ** 2))
            image = 0.1 + 0.8 * bump[..., None] * colour + rng.normal(0, 0.03, (size, size, 3))
            images.append(np.clip(image, 0.0, 1.0))
            labels.append(label)
    order = rng.permutation(len(images))
    return Dataset(np.stack(images)[order], np.asarray(labels)[order])


def small_config(**overrides):
    values = dict(input_shape=(12, 12, 3), blocks=SMALL_BLOCKS, addon_channels=6, n_classes=2, prototypes_per_class=2)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def toy_dataset():
    return blob_images(20, seed=0)


@pytest.fixture
def toy_test_dataset():
    return blob_images(15, seed=1)


@pytest.fixture
def small_model():
    return build_model(small_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
