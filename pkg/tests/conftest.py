"""Shared fixtures: the cached synthetic digit corpus and small hand-built datasets."""

import os
from pathlib import Path

import numpy as np
import pytest

from memoscope import data as mdata
from memoscope import synthdigits

CORPUS_SEED = 29
TRAIN_COUNT = 6000
VAL_COUNT = 2400


def _cache_root() -> Path:
    return Path(os.environ.get("MEMOSCOPE_TEST_CACHE",
                               Path.home() / ".cache" / "memoscope-tests"))


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    """Digit corpus as IDX files; generated once and reused across sessions."""
    path = _cache_root() / f"corpus-v1-s{CORPUS_SEED}-t{TRAIN_COUNT}-v{VAL_COUNT}"
    expected = [path / name for name in mdata.MNIST_FILES.values()]
    if not all(f.exists() for f in expected):
        synthdigits.write_corpus(path, train_count=TRAIN_COUNT, val_count=VAL_COUNT,
                                 seed=CORPUS_SEED)
    return path


@pytest.fixture(scope="session")
def train28(corpus_dir):
    return mdata.load_mnist_dir(corpus_dir)[0]


@pytest.fixture(scope="session")
def val28(corpus_dir):
    return mdata.load_mnist_dir(corpus_dir)[1]


@pytest.fixture(scope="session")
def train14(train28):
    return mdata.downscale(train28)


@pytest.fixture(scope="session")
def val14(val28):
    return mdata.downscale(val28)


@pytest.fixture(scope="session")
def desk1000(train14):
    """The 1000-example 14x14 working set most desk-scale runs train on."""
    return mdata.subset(train14, 1000, seed=5)


def make_plain_dataset(inputs, labels, num_classes, image_shape=None):
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = inputs.shape[0]
    if image_shape is None:
        image_shape = (inputs.shape[1],)
    return mdata.Dataset(
        inputs=inputs, true_labels=labels, effective_labels=labels.copy(),
        input_noised=np.zeros(n, dtype=bool), label_noised=np.zeros(n, dtype=bool),
        num_classes=num_classes, image_shape=image_shape,
    )


@pytest.fixture
def tiny_dataset():
    """12 examples, 6 pixels, 3 classes; values away from relu kinks."""
    rng = np.random.default_rng(99)
    inputs = rng.uniform(0.05, 0.95, size=(12, 6))
    labels = np.arange(12) % 3
    return make_plain_dataset(inputs, labels, num_classes=3)
