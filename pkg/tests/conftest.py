import numpy as np
import pytest

from mtqg import corpus
from mtqg.encoder import EncoderConfig
from mtqg.model import ModelConfig, QGModel
from mtqg.synthetic import random_examples, toy_corpus

TINY = EncoderConfig(d_w=4, d_p=2, d_n=2, d_c=2, d_ap=2, hidden=4)


def tiny_setup(seed=0, n=3, m=5, q=4, vocab_size=10, enc=TINY, jitter=0.3, sm_pair_mode="rerun",
               max_target_vocab=None):
    """Random examples, vocabs, batch and a model whose weights are pushed off the small init."""
    rng = np.random.default_rng(seed)
    examples = random_examples(rng, n, m, q, vocab_size=vocab_size)
    vocabs = corpus.build_vocabs(examples, max_target_vocab=max_target_vocab)
    model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, enc, sm_pair_mode), seed)
    if jitter:
        for p in model:
            p.data += rng.normal(0.0, jitter, size=p.shape)
    batch = corpus.make_batch(examples, vocabs)
    return examples, vocabs, model, batch


@pytest.fixture
def tiny():
    return tiny_setup()


@pytest.fixture
def toy():
    examples = toy_corpus()
    return examples, corpus.build_vocabs(examples, min_count=2)


ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
