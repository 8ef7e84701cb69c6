"""Corpus metrics: BLEU-1..4, ROUGE-L, OOV copy precision/recall, question-word agreement."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

from .autodiff import ContractError

QUESTION_WORDS = ("what", "who", "whom", "whose", "when", "where", "which", "why", "how")

Tokens = Sequence[str]


def _check_aligned(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> None:
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses but {len(refs)} references")


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def ngram_matches(hyps: Sequence[Tokens], refs: Sequence[Tokens], n: int) -> Tuple[int, int]:
    """Corpus totals of clipped n-gram matches and hypothesis n-grams."""
    _check_aligned(hyps, refs)
    matched = total = 0
    for h, r in zip(hyps, refs):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        matched += sum(min(c, rc[g]) for g, c in hc.items())
        total += sum(hc.values())
    return matched, total


def bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights and brevity penalty.

    A zero precision for n >= 2 is smoothed to ``(0 + 1) / (total + 1)``; a
    zero unigram precision gives 0.
    """
    _check_aligned(hyps, refs)
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = ngram_matches(hyps, refs, n)
        if matched == 0:
            if n == 1:
                return 0.0
            matched, total = 1, total + 1
        log_sum += math.log(matched / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / max_n)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyps: Sequence[Tokens], refs: Sequence[Tokens], beta_sq: float = 1.2) -> float:
    """Mean over pairs of the LCS F-measure ``(1+b^2) P R / (R + b^2 P)``."""
    _check_aligned(hyps, refs)
    if not hyps:
        return 0.0
    scores = []
    for h, r in zip(hyps, refs):
        lcs = lcs_length(h, r)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, rec = lcs / len(h), lcs / len(r)
        scores.append((1 + beta_sq) * p * rec / (rec + beta_sq * p))
    return sum(scores) / len(scores)


def copy_precision_recall(hyps: Sequence[Tokens], refs: Sequence[Tokens], vocab
                          ) -> Tuple[Optional[float], Optional[float]]:
    """Micro-averaged overlap of out-of-vocabulary words between generated and reference questions.

    ``vocab`` is anything supporting ``in`` (the target generation vocabulary).
    A metric whose denominator is zero is returned as ``None``.
    """
    _check_aligned(hyps, refs)
    both = in_g = in_r = 0
    for h, r in zip(hyps, refs):
        g = Counter(t for t in h if t not in vocab)
        ref = Counter(t for t in r if t not in vocab)
        both += sum((g & ref).values())
        in_g += sum(g.values())
        in_r += sum(ref.values())
    return (both / in_g if in_g else None, both / in_r if in_r else None)


def first_question_word(tokens: Tokens) -> Optional[str]:
    for t in tokens:
        if t.lower() in QUESTION_WORDS:
            return t.lower()
    return None


def question_word_accuracy(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> Optional[float]:
    """Share of pairs whose first question word agrees; references without one are skipped."""
    _check_aligned(hyps, refs)
    hits = counted = 0
    for h, r in zip(hyps, refs):
        rw = first_question_word(r)
        if rw is None:
            continue
        counted += 1
        hits += int(first_question_word(h) == rw)
    return hits / counted if counted else None


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    copy_precision: Optional[float]
    copy_recall: Optional[float]
    question_word_accuracy: Optional[float]

    def scaled(self) -> dict:
        """Values x100, as printed in results tables; absent metrics stay ``None``."""
        return {k: (None if v is None else 100.0 * v) for k, v in asdict(self).items()}


def evaluate(hyps: Sequence[Tokens], refs: Sequence[Tokens], vocab=None) -> EvalReport:
    p, r = copy_precision_recall(hyps, refs, vocab) if vocab is not None else (None, None)
    return EvalReport(
        bleu1=bleu(hyps, refs, 1),
        bleu2=bleu(hyps, refs, 2),
        bleu3=bleu(hyps, refs, 3),
        bleu4=bleu(hyps, refs, 4),
        rouge_l=rouge_l(hyps, refs),
        copy_precision=p,
        copy_recall=r,
        question_word_accuracy=question_word_accuracy(hyps, refs),
    )


def read_tokenized(path) -> List[List[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]
