"""Feature-enriched embeddings, BiLSTM encoder and answer-aware gated fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    d_w: int = 300
    d_p: int = 16
    d_n: int = 16
    d_c: int = 16
    d_ap: int = 16
    hidden: int = 256  # per direction

    def __post_init__(self):
        for name in ("d_w", "d_p", "d_n", "d_c", "d_ap", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def input_dim(self) -> int:
        return self.d_w + self.d_n + self.d_p + self.d_c + self.d_ap

    @property
    def state_dim(self) -> int:
        return 2 * self.hidden


@dataclass
class EncoderOutput:
    H: Tensor  # B x M x D, zero on padding
    h_m: Tensor  # B x D, last real position
    h_a: Tensor  # B x D, answer start
    z: Tensor  # B x D
    mask: np.ndarray


def uniform(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def init_lstm(prefix: str, in_dim: int, hidden: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Gate order along the 4H axis is input, forget, output, candidate."""
    b = np.zeros(4 * hidden)
    b[hidden: 2 * hidden] = 1.0
    return {
        f"{prefix}.W_x": uniform(rng, (in_dim, 4 * hidden)),
        f"{prefix}.W_h": uniform(rng, (hidden, 4 * hidden)),
        f"{prefix}.b": b,
    }


def init_bilstm(prefix: str, in_dim: int, hidden: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {**init_lstm(f"{prefix}.fwd", in_dim, hidden, rng), **init_lstm(f"{prefix}.bwd", in_dim, hidden, rng)}


def init_params(cfg: EncoderConfig, vocab_sizes: Mapping[str, int], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    d = cfg.state_dim
    p = {
        "s2s.emb.word": uniform(rng, (vocab_sizes["source"], cfg.d_w)),
        "s2s.emb.pos": uniform(rng, (vocab_sizes["pos"], cfg.d_p)),
        "s2s.emb.ner": uniform(rng, (vocab_sizes["ner"], cfg.d_n)),
        "s2s.emb.case": uniform(rng, (vocab_sizes["case"], cfg.d_c)),
        "s2s.emb.bio": uniform(rng, (4, cfg.d_ap)),
    }
    p.update(init_bilstm("s2s.enc", cfg.input_dim, cfg.hidden, rng))
    p.update({
        "s2s.fuse.W_m": uniform(rng, (2 * d, d)),
        "s2s.fuse.b_m": np.zeros(d),
        "s2s.fuse.W_a": uniform(rng, (2 * d, d)),
        "s2s.fuse.b_a": np.zeros(d),
    })
    return p


def embed(batch: Batch, params: Params) -> Tensor:
    """B x M x (d_w+d_n+d_p+d_c+d_ap); rows at padding are zero."""
    parts = [
        ad.gather_rows(params["s2s.emb.word"], batch.source_ids),
        ad.gather_rows(params["s2s.emb.ner"], batch.feature_ids["ner"]),
        ad.gather_rows(params["s2s.emb.pos"], batch.feature_ids["pos"]),
        ad.gather_rows(params["s2s.emb.case"], batch.feature_ids["case"]),
        ad.gather_rows(params["s2s.emb.bio"], batch.feature_ids["bio"]),
    ]
    return ad.concat(parts, axis=-1) * batch.source_mask[..., None].astype(float)


def _gates(x_proj: Tensor, h_prev: Tensor, c_prev: Tensor, params: Params, prefix: str) -> Tuple[Tensor, Tensor]:
    hidden = h_prev.shape[-1]
    gates = x_proj + ad.matmul(h_prev, params[f"{prefix}.W_h"])
    ifo = ad.sigmoid(gates[..., : 3 * hidden])
    cand = ad.tanh(gates[..., 3 * hidden:])
    c = ifo[..., hidden: 2 * hidden] * c_prev + ifo[..., :hidden] * cand
    h = ifo[..., 2 * hidden:] * ad.tanh(c)
    return h, c


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: Params, prefix: str) -> Tuple[Tensor, Tensor]:
    """One LSTM step on ``x`` (B x in) from state ``(h_prev, c_prev)`` (B x H each)."""
    x_proj = ad.affine(x, params[f"{prefix}.W_x"], params[f"{prefix}.b"])
    return _gates(x_proj, h_prev, c_prev, params, prefix)


def _run_direction(x_proj: Tensor, mask: np.ndarray, params: Params, prefix: str, reverse: bool):
    b, m = mask.shape
    hidden = params[f"{prefix}.W_h"].shape[0]
    h = Tensor(np.zeros((b, hidden)))
    c = Tensor(np.zeros((b, hidden)))
    outs = [None] * m
    steps = range(m - 1, -1, -1) if reverse else range(m)
    for t in steps:
        h_new, c_new = _gates(x_proj[:, t], h, c, params, prefix)
        keep = mask[:, t, None].astype(float)
        # padding is a suffix, so zeroing keeps the reverse pass starting fresh at the last real token
        h, c = h_new * keep, c_new * keep
        outs[t] = h
    return ad.stack(outs, axis=1)


def bilstm_encode(embedded: Tensor, mask: np.ndarray, params: Params, prefix: str = "s2s.enc") -> Tensor:
    """B x M x 2H states ``[forward; backward]``, zero at padded positions.

    Padding must be a suffix of each row.
    """
    fwd_proj = ad.affine(embedded, params[f"{prefix}.fwd.W_x"], params[f"{prefix}.fwd.b"])
    bwd_proj = ad.affine(embedded, params[f"{prefix}.bwd.W_x"], params[f"{prefix}.bwd.b"])
    fwd = _run_direction(fwd_proj, mask, params, f"{prefix}.fwd", reverse=False)
    bwd = _run_direction(bwd_proj, mask, params, f"{prefix}.bwd", reverse=True)
    return ad.concat([fwd, bwd], axis=-1)


def gated_fusion(h_m: Tensor, h_a: Tensor, params: Params) -> Tensor:
    """``z = g_m * h_m + g_a * h_a`` with elementwise sigmoid gates read from ``[h_m; h_a]``."""
    both = ad.concat([h_m, h_a], axis=-1)
    g_m = ad.sigmoid(ad.affine(both, params["s2s.fuse.W_m"], params["s2s.fuse.b_m"]))
    g_a = ad.sigmoid(ad.affine(both, params["s2s.fuse.W_a"], params["s2s.fuse.b_a"]))
    return g_m * h_m + g_a * h_a


def encode(batch: Batch, params: Params) -> EncoderOutput:
    x = embed(batch, params)
    H = bilstm_encode(x, batch.source_mask, params)
    rows = np.arange(batch.size)
    h_m = H[rows, batch.source_lengths - 1]
    h_a = H[rows, batch.answer_starts]
    return EncoderOutput(H=H, h_m=h_m, h_a=h_a, z=gated_fusion(h_m, h_a, params), mask=batch.source_mask)

