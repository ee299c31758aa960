"""
Shared fixtures: src/ on the import path, tiny models and corpora, and the
--runslow switch for reference-scale runs.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from core.model import ModelConfig  # noqa: E402
from core.synthetic import SynthConfig, generate_corpus  # noqa: E402
from core.text_pipeline import EncodedExample, PreprocessSettings, preprocess_corpus  # noqa: E402
from core.training import TrainConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run reference-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: reference-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=50, n_labels=4, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=10, seed=3)


def make_examples(config: ModelConfig, count: int, seed: int = 0, min_real: int = 3):
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(count):
        n_real = int(rng.integers(min_real, config.max_len + 1))
        pad = config.max_len - n_real
        ids = [int(t) for t in rng.integers(2, config.vocab_size, size=n_real)] + [0] * pad
        labels = tuple(int(v) for v in rng.integers(0, 2, size=config.n_labels))
        examples.append(EncodedExample(tuple(ids), tuple([1] * n_real + [0] * pad), labels, f"ex{i}"))
    return examples


@pytest.fixture
def tiny_examples(tiny_config):
    return make_examples(tiny_config, 6)


@pytest.fixture
def fast_train_config():
    return TrainConfig(learning_rate=1e-2, batch_size=4, max_epochs=3, patience=0, seed=5)


@pytest.fixture(scope="session")
def small_corpus():
    """Encoded planted-trigger corpus: 120 notes, 3 labels"""
    synth = SynthConfig.uniform(n_docs=120, n_labels=3, marginal=0.35, cooccur_boost=0.0,
                                filler_vocab=40, doc_len=(8, 14), seed=11)
    settings = PreprocessSettings(min_tokens=3, max_len=24, min_freq=1, workers=2)
    return preprocess_corpus(generate_corpus(synth), settings)
