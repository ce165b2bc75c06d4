import numpy as np
import pytest

from vdc.data import SynthConfig, Vocab, synth_generate, tokenize
from vdc.trainer import Example


def small_corpus(n_train=60, n_valid=12, n_test=12, seed=3, **kw):
    cfg = dict(event_vocab=6, events_min=1, events_max=3, n_slots=8, d_app=10, time_features=4,
               n_train=n_train, n_valid=n_valid, n_test=n_test, seed=seed, grids=False)
    cfg.update(kw)
    return synth_generate(SynthConfig(**cfg))


def to_examples(videos, vocab):
    return [Example(v.appearance, vocab.encode(tokenize(v.caption)), v.id) for v in videos]


@pytest.fixture(scope="session")
def toy_data():
    corpus = small_corpus()
    vocab = Vocab.build(tokenize(v.caption) for v in corpus.splits["train"])
    splits = {k: to_examples(v, vocab) for k, v in corpus.splits.items()}
    return corpus, vocab, splits


@pytest.fixture
def rng():
    return np.random.default_rng(0)
