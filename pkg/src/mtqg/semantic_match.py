"""Sentence-level semantic matching: classify (sentence vector, question vector) pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import uniform

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]


@dataclass
class SMResult:
    loss: Tensor
    probs: Tensor  # P x 2, column 1 = matching
    labels: np.ndarray

    @property
    def accuracy(self) -> float:
        if not len(self.labels):
            return float("nan")
        return float(np.mean(np.argmax(self.probs.data, axis=-1) == self.labels))


def init_params(d: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {"sm.W_c": uniform(rng, (2 * d, 2)), "sm.b_c": np.zeros(2)}


def question_vector(S: Tensor, target_mask: np.ndarray) -> Tensor:
    """Decoder state at the last real target position of each row (B x D)."""
    last = target_mask.sum(axis=1) - 1
    return S[np.arange(S.shape[0]), last]


def sm_forward(z: Tensor, s_n: Tensor, params: Params) -> Tensor:
    """Two-way softmax over ``W_c^T [z; s_n] + b_c``; index 1 means matching."""
    logits = ad.affine(ad.concat([z, s_n], axis=-1), params["sm.W_c"], params["sm.b_c"])
    return ad.softmax(logits, axis=-1)


def sm_loss_from_vectors(z: Tensor, s_n: Tensor, labels: Sequence[int], params: Params) -> SMResult:
    """Mean cross-entropy of ``len(labels)`` already-paired rows of ``z`` and ``s_n``."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = sm_forward(z, s_n, params)
    logp = ad.log(ad.clamp_min(ad.take_last(probs, labels), 1e-12))
    return SMResult(ad.mul(ad.sum(logp), -1.0 / len(labels)), probs, labels)


def sm_loss(pairs: Sequence[Tuple[int, int, int]], z: Tensor, question_vectors: Tensor, params: Params) -> SMResult:
    """Cross-entropy over ``(sentence_index, question_index, label)`` pairs.

    ``question_vectors`` holds one vector per question index (B x D); the
    sentence vector comes from ``z``.  An empty pair list yields a zero loss.
    """
    pairs = list(pairs)
    if not pairs:
        logger.warning("semantic-match loss over an empty pair set")
        return SMResult(Tensor(0.0), Tensor(np.zeros((0, 2))), np.zeros(0, dtype=np.int64))
    si = np.array([p[0] for p in pairs])
    qi = np.array([p[1] for p in pairs])
    return sm_loss_from_vectors(z[si], question_vectors[qi], [p[2] for p in pairs], params)
