import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from specmap import data, synth  # noqa: E402


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small shared corpus: 12 train / 6 dev / 4 test utterances, 8 classes."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth.build_corpus(root, {"train": 12, "dev": 6, "test": 4},
                                  num_classes=8, seed=11)
    return manifest


@pytest.fixture(scope="session")
def tiny_train(tiny_corpus):
    return data.load_split(tiny_corpus, "train")


@pytest.fixture(scope="session")
def tiny_dev(tiny_corpus):
    return data.load_split(tiny_corpus, "dev")


def rand(shape, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal(shape)
