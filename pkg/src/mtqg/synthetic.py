"""Synthetic corpora for gradient checks, smoke tests and the overfit benchmark."""

from __future__ import annotations

from typing import List

import numpy as np

from .corpus import Example

_POS = ("NN", "VB", "DT", "IN", "CD")
_NER = ("O", "PER", "LOC")
_CASE = ("LOW", "CAP")


def random_examples(rng: np.random.Generator, n: int, sentence_len: int, question_len: int,
                    vocab_size: int = 16, vary_lengths: bool = True) -> List[Example]:
    """Random token soup; lengths vary between 1 and the given maxima when ``vary_lengths``."""
    out = []
    for k in range(n):
        m = sentence_len if not vary_lengths or k == 0 else int(rng.integers(2, sentence_len + 1))
        q = question_len if not vary_lengths or k == 0 else int(rng.integers(1, question_len + 1))
        start = int(rng.integers(m))
        end = int(rng.integers(start, m))
        out.append(Example(
            sentence_tokens=[f"w{rng.integers(vocab_size)}" for _ in range(m)],
            pos_tags=[_POS[rng.integers(len(_POS))] for _ in range(m)],
            ner_tags=[_NER[rng.integers(len(_NER))] for _ in range(m)],
            case_tags=[_CASE[rng.integers(len(_CASE))] for _ in range(m)],
            answer_start=start,
            answer_end=end,
            question_tokens=[f"w{rng.integers(vocab_size)}" for _ in range(q)],
        ))
    return out


_FACTS = [
    # person, verb (past), verb (base), object, city, year
    ("tesla", "built", "build", "motor", "graz", "1882"),
    ("curie", "found", "find", "radium", "paris", "1898"),
    ("edison", "tested", "test", "bulb", "menlo", "1879"),
    ("darwin", "wrote", "write", "book", "kent", "1859"),
    ("turing", "designed", "design", "engine", "london", "1936"),
    ("galileo", "made", "make", "telescope", "padua", "1609"),
    ("lovelace", "drafted", "draft", "program", "surrey", "1843"),
    ("watt", "improved", "improve", "pump", "glasgow", "1765"),
]


def toy_corpus() -> List[Example]:
    """32 question-generation examples: 8 sentences, each asked about 4 different answers.

    Sentence template ``<person> <verb> the <object> in <city> in <year> .``
    with questions asking who / what / where / when.  Examples sharing a
    sentence share a ``passage_id``.
    """
    examples = []
    for k, (person, past, base, obj, city, year) in enumerate(_FACTS):
        tokens = [person, past, "the", obj, "in", city, "in", year, "."]
        pos = ["NNP", "VBD", "DT", "NN", "IN", "NNP", "IN", "CD", "."]
        ner = ["PER", "O", "O", "O", "O", "LOC", "O", "DATE", "O"]
        case = ["LOW"] * len(tokens)
        asks = [
            (0, 0, ["who", past, "the", obj, "in", city, "?"]),
            (2, 3, ["what", "did", person, base, "in", year, "?"]),
            (5, 5, ["where", "did", person, base, "the", obj, "?"]),
            (7, 7, ["when", "did", person, base, "the", obj, "?"]),
        ]
        for start, end, question in asks:
            examples.append(Example(list(tokens), list(pos), list(ner), list(case), start, end,
                                    question, passage_id=f"s{k}"))
    return examples
