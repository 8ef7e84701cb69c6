"""Examples, vocabularies, BIO answer features and padded batches."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<sos>", "<eos>"
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, SOS, EOS)

BIO_TAGS = ("O", "B", "I")
# BIO feature ids: 0 is padding, then O/B/I
BIO_IDS = {tag: i + 1 for i, tag in enumerate(BIO_TAGS)}
FEATURES = ("pos", "ner", "case")


class CorpusError(ValueError):
    """A record could not be parsed or failed validation."""


@dataclass
class Example:
    sentence_tokens: List[str]
    pos_tags: List[str]
    ner_tags: List[str]
    case_tags: List[str]
    answer_start: int
    answer_end: int
    question_tokens: List[str]
    passage_id: Optional[str] = None

    def validate(self) -> None:
        m = len(self.sentence_tokens)
        if m == 0:
            raise CorpusError("empty sentence")
        for name in ("pos_tags", "ner_tags", "case_tags"):
            if len(getattr(self, name)) != m:
                raise CorpusError(f"{name} has length {len(getattr(self, name))}, sentence has {m}")
        if not 0 <= self.answer_start <= self.answer_end < m:
            raise CorpusError(
                f"answer span ({self.answer_start}, {self.answer_end}) outside sentence of length {m}"
            )
        if not self.question_tokens:
            raise CorpusError("empty question")

    @property
    def bio_tags(self) -> List[str]:
        return bio_tags(len(self.sentence_tokens), self.answer_start, self.answer_end)

    def to_record(self) -> dict:
        rec = {
            "tokens": self.sentence_tokens,
            "pos": self.pos_tags,
            "ner": self.ner_tags,
            "case": self.case_tags,
            "question": self.question_tokens,
            "answer_start": self.answer_start,
            "answer_end": self.answer_end,
        }
        if self.passage_id is not None:
            rec["passage_id"] = self.passage_id
        return rec


def bio_tags(length: int, start: int, end: int) -> List[str]:
    return ["B" if i == start else "I" if start < i <= end else "O" for i in range(length)]


def case_tag(token: str) -> str:
    if token.isupper():
        return "UP"
    if token[:1].isupper():
        return "CAP"
    return "LOW"


def _parse_record(obj: dict) -> Example:
    def strings(key):
        val = obj[key]
        if not isinstance(val, list) or not all(isinstance(t, str) for t in val):
            raise CorpusError(f"field {key!r} must be an array of strings")
        return list(val)

    def integer(key):
        val = obj[key]
        if isinstance(val, bool) or not isinstance(val, int):
            raise CorpusError(f"field {key!r} must be an integer")
        return val

    try:
        ex = Example(
            sentence_tokens=strings("tokens"),
            pos_tags=strings("pos"),
            ner_tags=strings("ner"),
            case_tags=strings("case"),
            answer_start=integer("answer_start"),
            answer_end=integer("answer_end"),
            question_tokens=strings("question"),
            passage_id=obj.get("passage_id"),
        )
    except KeyError as exc:
        raise CorpusError(f"missing field {exc.args[0]!r}") from None
    ex.validate()
    return ex


def load_examples(path) -> List[Example]:
    """Read line-delimited JSON records.

    Raises:
        CorpusError: for a malformed or invalid line; the message carries its
            1-based line number.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise CorpusError("record is not an object")
                examples.append(_parse_record(obj))
            except (json.JSONDecodeError, CorpusError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return examples


def save_examples(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record()) + "\n")


class Vocab:
    """Token <-> id table. Ids 0..3 are always pad, unk, sos, eos."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([t for t in lines if t])

    @classmethod
    def from_counts(cls, counts: Counter, max_size: Optional[int] = None, min_count: int = 1) -> "Vocab":
        ranked = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                        key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls(ranked)


@dataclass
class Vocabs:
    source: Vocab
    target: Vocab
    features: Dict[str, Vocab]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.source.save(d / "vocab.source.txt")
        self.target.save(d / "vocab.target.txt")
        for name, v in self.features.items():
            v.save(d / f"vocab.{name}.txt")

    @classmethod
    def load(cls, directory) -> "Vocabs":
        d = Path(directory)
        return cls(
            Vocab.load(d / "vocab.source.txt"),
            Vocab.load(d / "vocab.target.txt"),
            {name: Vocab.load(d / f"vocab.{name}.txt") for name in FEATURES},
        )


def build_vocabs(
    examples: Sequence[Example],
    max_source_vocab: Optional[int] = None,
    max_target_vocab: Optional[int] = None,
    min_count: int = 1,
) -> Vocabs:
    """Frequency-ranked vocabularies (ties broken lexicographically)."""
    if not examples:
        raise CorpusError("cannot build vocabularies from an empty corpus")
    src = Counter(t for ex in examples for t in ex.sentence_tokens)
    tgt = Counter(t for ex in examples for t in ex.question_tokens)
    feats = {
        "pos": Counter(t for ex in examples for t in ex.pos_tags),
        "ner": Counter(t for ex in examples for t in ex.ner_tags),
        "case": Counter(t for ex in examples for t in ex.case_tags),
    }
    return Vocabs(
        Vocab.from_counts(src, max_source_vocab, min_count),
        Vocab.from_counts(tgt, max_target_vocab, min_count),
        {k: Vocab.from_counts(c) for k, c in feats.items()},
    )


@dataclass
class Batch:
    """Padded id matrices for a list of examples.

    ``source_ext_ids`` gives each source token's id in the *target* extended
    vocabulary: its target id when the target vocab knows it, otherwise
    ``len(target) + k`` where ``k`` indexes ``source_oov_maps[b]``.
    ``target_in_ids`` is the sos-prefixed decoder input (extended ids replaced
    by unk); ``target_out_ids`` is the eos-suffixed gold output.
    """

    examples: List[Example]
    source_ids: np.ndarray
    feature_ids: Dict[str, np.ndarray]
    source_mask: np.ndarray
    source_ext_ids: np.ndarray
    source_oov_maps: List[Dict[str, int]]
    target_in_ids: np.ndarray
    target_out_ids: np.ndarray
    target_mask: np.ndarray
    answer_starts: np.ndarray
    answer_ends: np.ndarray
    target_vocab_size: int

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def source_lengths(self) -> np.ndarray:
        return self.source_mask.sum(axis=1)

    @property
    def target_lengths(self) -> np.ndarray:
        return self.target_mask.sum(axis=1)

    @property
    def n_extended(self) -> int:
        """Size of the extended output space for this batch."""
        return self.target_vocab_size + max((len(m) for m in self.source_oov_maps), default=0)

    def decode(self, row: int, ids: Sequence[int], target: Vocab) -> List[str]:
        """Map output ids (possibly extended) back to tokens for example ``row``."""
        inverse = {v: k for k, v in self.source_oov_maps[row].items()}
        out = []
        for i in ids:
            i = int(i)
            out.append(target.token(i) if i < len(target) else inverse.get(i, UNK))
        return out


def make_batch(examples: Sequence[Example], vocabs: Vocabs, with_targets: bool = True) -> Batch:
    examples = list(examples)
    b = len(examples)
    m = max(len(ex.sentence_tokens) for ex in examples)
    n = max(len(ex.question_tokens) for ex in examples) + 1 if with_targets else 1
    tv = vocabs.target
    source_ids = np.zeros((b, m), dtype=np.int64)
    feature_ids = {k: np.zeros((b, m), dtype=np.int64) for k in (*FEATURES, "bio")}
    source_mask = np.zeros((b, m), dtype=bool)
    source_ext = np.zeros((b, m), dtype=np.int64)
    target_in = np.zeros((b, n), dtype=np.int64)
    target_out = np.zeros((b, n), dtype=np.int64)
    target_mask = np.zeros((b, n), dtype=bool)
    oov_maps: List[Dict[str, int]] = []
    for r, ex in enumerate(examples):
        k = len(ex.sentence_tokens)
        source_ids[r, :k] = vocabs.source.encode(ex.sentence_tokens)
        feature_ids["pos"][r, :k] = vocabs.features["pos"].encode(ex.pos_tags)
        feature_ids["ner"][r, :k] = vocabs.features["ner"].encode(ex.ner_tags)
        feature_ids["case"][r, :k] = vocabs.features["case"].encode(ex.case_tags)
        feature_ids["bio"][r, :k] = [BIO_IDS[t] for t in ex.bio_tags]
        source_mask[r, :k] = True
        oov: Dict[str, int] = {}
        for i, tok in enumerate(ex.sentence_tokens):
            if tok in tv:
                source_ext[r, i] = tv.id(tok)
            else:
                if tok not in oov:
                    oov[tok] = len(tv) + len(oov)
                source_ext[r, i] = oov[tok]
        oov_maps.append(oov)
        if with_targets:
            q = ex.question_tokens
            out_ids = [tv.id(t) if t in tv else oov.get(t, UNK_ID) for t in q] + [EOS_ID]
            in_ids = [SOS_ID] + [i if i < len(tv) else UNK_ID for i in out_ids[:-1]]
            target_in[r, : len(in_ids)] = in_ids
            target_out[r, : len(out_ids)] = out_ids
            target_mask[r, : len(out_ids)] = True
    return Batch(
        examples=examples,
        source_ids=source_ids,
        feature_ids=feature_ids,
        source_mask=source_mask,
        source_ext_ids=source_ext,
        source_oov_maps=oov_maps,
        target_in_ids=target_in,
        target_out_ids=target_out,
        target_mask=target_mask,
        answer_starts=np.array([ex.answer_start for ex in examples], dtype=np.int64),
        answer_ends=np.array([ex.answer_end for ex in examples], dtype=np.int64),
        target_vocab_size=len(tv),
    )


@dataclass
class PairSample:
    pairs: List[Tuple[int, int, int]] = field(default_factory=list)
    warning: Optional[str] = None

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def sample_sm_pairs(batch: Batch, rng: np.random.Generator, prefer_same_passage: bool = False) -> PairSample:
    """Positive ``(i, i, 1)`` for every row plus one negative ``(i, j, 0)``, ``j != i``.

    With ``prefer_same_passage`` the negative question comes from another
    example sharing ``passage_id`` whenever the batch holds one.
    """
    b = batch.size
    positives = [(i, i, 1) for i in range(b)]
    if b < 2:
        logger.warning("semantic-match sampling on a batch of one: no negatives")
        return PairSample(positives, warning="batch of size 1 has no negative pairs")
    negatives = []
    for i in range(b):
        pool = None
        if prefer_same_passage:
            pid = batch.examples[i].passage_id
            if pid is not None:
                same = [j for j in range(b) if j != i and batch.examples[j].passage_id == pid]
                pool = same or None
        if pool is None:
            j = int(rng.integers(b - 1))
            j = j + 1 if j >= i else j
        else:
            j = pool[int(rng.integers(len(pool)))]
        negatives.append((i, j, 0))
    return PairSample(positives + negatives)


def iter_batches(examples: Sequence[Example], batch_size: int, rng: Optional[np.random.Generator] = None):
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start: start + batch_size]]
