import numpy as np
import pytest

from wmspoof.config import config_from_dict
from wmspoof.corpus import synthetic_corpus
from wmspoof.textmodel import build_vocab, corpus_lines, tokenize

SMALL = {
    "synthetic": {"n_lines": 2400, "n_words": 60, "branching": 16},
    "distill": {"n_sequences": 1500, "length": 48},
    "evaluation": {"n_positive": 24, "n_null": 120, "length": 120, "n_student": 24},
    "sweep_alphas": [2.0, 4.5],
}


@pytest.fixture(scope="session")
def small_config():
    return config_from_dict(SMALL)


@pytest.fixture(scope="session")
def small_text():
    return synthetic_corpus(n_lines=1200, n_words=40, branching=12, seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_text):
    return build_vocab(small_text)


@pytest.fixture(scope="session")
def small_seqs(small_text, small_vocab):
    return [tokenize(line, small_vocab) for line in corpus_lines(small_text)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
