import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gadfit import data as D
from gadfit import extractor as E


@pytest.fixture(scope="session")
def tiny_corpus():
    """2 categories, 32x32, small counts: fast but realistic."""
    return D.generate_corpus(num_categories=2, train_per_category=14, test_per_category=6, size=32, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """Extractor pretrained a little on the tiny corpus textures."""
    images, labels = D.stack_labeled(tiny_corpus)
    model = E.build_extractor(channels=(8, 12, 16, 24), seed=1)
    model, _ = E.pretrain_classifier(model, images, labels, epochs=3, lr=3e-3, seed=5, batch_size=8)
    return model


def rng_for(seed):
    return np.random.default_rng(seed)
