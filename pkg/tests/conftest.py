"""Shared fixtures: a full-size CIFAR-10-layout directory filled with
synthetic images, generated once per session."""

import numpy as np
import pytest

from tnlayers import data
from tnlayers.init import Rng


@pytest.fixture(scope="session")
def synthetic_pair():
    rng = Rng(2024).split("fixture")
    train = data.synthetic_images(50000, rng)
    test = data.synthetic_images(10000, rng)
    return train, test


@pytest.fixture(scope="session")
def cifar10_dir(tmp_path_factory, synthetic_pair):
    root = tmp_path_factory.mktemp("cifar10")
    data.write_cifar10(root, *synthetic_pair)
    return root


@pytest.fixture(scope="session")
def cifar100_dir(tmp_path_factory, synthetic_pair):
    train, test = synthetic_pair
    root = tmp_path_factory.mktemp("cifar100")

    def blob(ds):
        cols = np.stack([np.zeros(len(ds), dtype=np.uint8),
                         ds.labels.astype(np.uint8)], axis=1)
        return data.encode_cifar(cols, ds.images)

    (root / "train.bin").write_bytes(blob(train))
    (root / "test.bin").write_bytes(blob(test))
    return root
