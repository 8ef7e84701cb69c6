"""Answer-position inference head: bidirectional attention flow between the
encoder states H and decoder states S, two modeling BiLSTMs and start/end
pointers over the source positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import bilstm_encode, init_bilstm, uniform

Params = Mapping[str, Tensor]
PROB_FLOOR = 1e-12


@dataclass
class SpanOutput:
    p1: Tensor  # B x M
    p2: Tensor  # B x M
    H_tilde: Tensor
    S_tilde: Tensor


def init_params(d: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    if d % 2:
        raise ValueError("state size must be even")
    p = {
        "ap.sim.w": uniform(rng, (3 * d,)),
        "ap.mlp.W1": uniform(rng, (4 * d, d)),
        "ap.mlp.b1": np.zeros(d),
        "ap.mlp.W2": uniform(rng, (d, d)),
        "ap.mlp.b2": np.zeros(d),
        "ap.W_p1": uniform(rng, (2 * d, 1)),
        "ap.W_p2": uniform(rng, (2 * d, 1)),
    }
    p.update(init_bilstm("ap.m1", d, d // 2, rng))
    p.update(init_bilstm("ap.m2", d, d // 2, rng))
    return p


def similarity(H: Tensor, S: Tensor, params: Params) -> Tensor:
    """``sim[b, i, j] = w^T [h_i; s_j; h_i * s_j]`` (B x M x N)."""
    d = H.shape[-1]
    w = params["ap.sim.w"]
    w_h = ad.reshape(w[:d], (d, 1))
    w_s = ad.reshape(w[d: 2 * d], (d, 1))
    w_hs = w[2 * d:]
    term_h = ad.matmul(H, w_h)  # B x M x 1
    term_s = ad.swapaxes(ad.matmul(S, w_s), 1, 2)  # B x 1 x N
    term_hs = ad.matmul(H * w_hs, ad.swapaxes(S, 1, 2))
    return term_h + term_s + term_hs


def s2q_attention(H: Tensor, S: Tensor, source_mask: np.ndarray, target_mask: np.ndarray, params: Params,
                  sim: Tensor = None) -> Tensor:
    """Question-aware sentence states: each ``h_i`` attends over the question (B x M x D)."""
    sim = similarity(H, S, params) if sim is None else sim
    a = ad.softmax(sim, axis=-1, mask=target_mask[:, None, :])
    return ad.matmul(a, S)


def q2s_attention(H: Tensor, S: Tensor, source_mask: np.ndarray, target_mask: np.ndarray, params: Params,
                  sim: Tensor = None) -> Tensor:
    """Sentence summary ``sum_i b_i h_i`` with ``b = softmax_i(max_j sim)``, tiled to B x M x D."""
    sim = similarity(H, S, params) if sim is None else sim
    # padded question columns must never win the max
    penalty = np.where(target_mask[:, None, :], 0.0, ad.MASK_FILL)
    best = ad.max(sim + penalty, axis=-1)  # B x M
    b = ad.softmax(best, axis=-1, mask=source_mask)
    summary = ad.matmul(ad.expand_dims(b, 1), H)  # B x 1 x D
    return ad.broadcast_to(summary, H.shape)


def _mlp(x: Tensor, params: Params) -> Tensor:
    hidden = ad.tanh(ad.affine(x, params["ap.mlp.W1"], params["ap.mlp.b1"]))
    return ad.affine(hidden, params["ap.mlp.W2"], params["ap.mlp.b2"])


def span_logits(H: Tensor, H_tilde: Tensor, S_tilde: Tensor, source_mask: np.ndarray,
                params: Params) -> Tuple[Tensor, Tensor]:
    """Start/end distributions ``(p1, p2)`` over source positions (B x M each)."""
    keep = source_mask[..., None].astype(float)
    G = _mlp(ad.concat([H, H_tilde, H * H_tilde, H * S_tilde], axis=-1), params) * keep
    M1 = bilstm_encode(G, source_mask, params, prefix="ap.m1")
    M2 = bilstm_encode(M1, source_mask, params, prefix="ap.m2")
    l1 = ad.matmul(ad.concat([H_tilde, M1], axis=-1), params["ap.W_p1"])
    l2 = ad.matmul(ad.concat([H_tilde, M2], axis=-1), params["ap.W_p2"])
    b, m = source_mask.shape
    p1 = ad.softmax(ad.reshape(l1, (b, m)), axis=-1, mask=source_mask)
    p2 = ad.softmax(ad.reshape(l2, (b, m)), axis=-1, mask=source_mask)
    return p1, p2


def forward(H: Tensor, S: Tensor, source_mask: np.ndarray, target_mask: np.ndarray, params: Params) -> SpanOutput:
    sim = similarity(H, S, params)
    H_tilde = s2q_attention(H, S, source_mask, target_mask, params, sim)
    S_tilde = q2s_attention(H, S, source_mask, target_mask, params, sim)
    p1, p2 = span_logits(H, H_tilde, S_tilde, source_mask, params)
    return SpanOutput(p1, p2, H_tilde, S_tilde)


def ap_loss(p1: Tensor, p2: Tensor, answer_starts, answer_ends, source_mask: np.ndarray = None) -> Tensor:
    """Batch mean of ``-(log p1[start] + log p2[end])``.

    Raises:
        ContractError: if a gold index falls on padding.
    """
    starts = np.asarray(answer_starts, dtype=np.int64)
    ends = np.asarray(answer_ends, dtype=np.int64)
    if source_mask is not None:
        rows = np.arange(len(starts))
        if not (source_mask[rows, starts].all() and source_mask[rows, ends].all()):
            raise ContractError("gold answer index lies on padding")
    lp1 = ad.log(ad.clamp_min(ad.take_last(p1, starts), PROB_FLOOR))
    lp2 = ad.log(ad.clamp_min(ad.take_last(p2, ends), PROB_FLOOR))
    return ad.mul(ad.sum(lp1 + lp2), -1.0 / len(starts))


def predict_span(p1: np.ndarray, p2: np.ndarray) -> Tuple[int, int]:
    """``argmax_{i <= j} p1[i] * p2[j]``; ties go to the smallest ``i`` then ``j``."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    scores = np.where(np.triu(np.ones((len(p1), len(p2)), dtype=bool)), np.outer(p1, p2), -np.inf)
    # row-major argmax returns the first maximiser in (i, j) order
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    return int(i), int(j)
