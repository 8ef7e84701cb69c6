"""Attention LSTM decoder with input feeding and a pointer-generator output layer."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS_ID, PAD_ID, SOS_ID, UNK_ID, Batch
from .encoder import EncoderOutput, _gates, encode, init_lstm, uniform

Params = Mapping[str, Tensor]
PROB_FLOOR = 1e-12


@dataclass
class DecoderState:
    s: Tensor  # B x D
    cell: Tensor  # B x D
    c_prev: Tensor  # B x D, previous context


@dataclass
class StepOutput:
    alpha: Tensor  # ... x M
    context: Tensor  # ... x D
    p_generate: Tensor  # ... x |V|
    g_copy: Tensor  # ... x 1
    p_copy: Tensor  # ... x (|V| + #oov)
    p_final: Tensor  # ... x (|V| + #oov)


@dataclass
class DecoderTrace:
    """Teacher-forced run: per-step states, contexts and attention, stacked on axis 1."""

    S: Tensor  # B x T x D
    C: Tensor  # B x T x D
    alphas: Tensor  # B x T x M


@dataclass
class NLLResult:
    loss: Tensor
    floored: int  # gold probabilities that hit the floor
    tokens: int


def init_params(d_w: int, d: int, target_vocab: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    p = {"s2s.dec.emb": uniform(rng, (target_vocab, d_w))}
    p.update(init_lstm("s2s.dec.lstm", d_w + d, d, rng))
    p.update({
        "s2s.att.W": uniform(rng, (d, d)),
        "s2s.att.U": uniform(rng, (d, d)),
        "s2s.att.v": uniform(rng, (d,)),
        "s2s.gen.W1": uniform(rng, (2 * d, d)),
        "s2s.gen.b1": np.zeros(d),
        "s2s.gen.W2": uniform(rng, (d, target_vocab)),
        "s2s.gen.b2": np.zeros(target_vocab),
        "s2s.copy.W": uniform(rng, (d, 1)),
        "s2s.copy.U": uniform(rng, (d, 1)),
        "s2s.copy.b": np.zeros(1),
    })
    return p


def initial_state(z: Tensor) -> DecoderState:
    zeros = Tensor(np.zeros(z.shape))
    return DecoderState(s=z, cell=zeros, c_prev=Tensor(np.zeros(z.shape)))


def attention(s_t: Tensor, H: Tensor, source_mask: np.ndarray, params: Params,
              UH: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Additive attention ``e_i = v^T tanh(W s + U h_i)``; returns ``(alpha, context)``.

    ``UH`` may carry a cached ``H @ U``.
    """
    if UH is None:
        UH = ad.matmul(H, params["s2s.att.U"])
    Ws = ad.matmul(s_t, params["s2s.att.W"])
    v = ad.reshape(params["s2s.att.v"], (-1, 1))
    e = ad.matmul(ad.tanh(UH + ad.expand_dims(Ws, 1)), v)
    alpha = ad.softmax(ad.reshape(e, e.shape[:-1]), axis=-1, mask=source_mask)
    context = ad.matmul(ad.expand_dims(alpha, 1), H)
    return alpha, ad.reshape(context, (context.shape[0], context.shape[-1]))


def recurrent_step(state: DecoderState, w_emb: Tensor, H: Tensor, mask: np.ndarray, params: Params,
                   UH: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, DecoderState]:
    x = ad.concat([w_emb, state.c_prev], axis=-1)
    x_proj = ad.affine(x, params["s2s.dec.lstm.W_x"], params["s2s.dec.lstm.b"])
    s, cell = _gates(x_proj, state.s, state.cell, params, "s2s.dec.lstm")
    alpha, context = attention(s, H, mask, params, UH)
    return alpha, context, DecoderState(s=s, cell=cell, c_prev=context)


def generation_mask(vocab_size: int) -> np.ndarray:
    mask = np.ones(vocab_size, dtype=bool)
    mask[[PAD_ID, SOS_ID]] = False
    return mask


def output_distribution(s: Tensor, context: Tensor, alpha: Tensor, source_ext_ids: np.ndarray,
                        n_extended: int, params: Params) -> StepOutput:
    """Pointer-generator mixture for states of any leading shape.

    ``source_ext_ids`` must broadcast against ``alpha``.
    """
    hidden = ad.tanh(ad.affine(ad.concat([s, context], axis=-1), params["s2s.gen.W1"], params["s2s.gen.b1"]))
    logits = ad.affine(hidden, params["s2s.gen.W2"], params["s2s.gen.b2"])
    vocab = logits.shape[-1]
    p_generate = ad.softmax(logits, axis=-1, mask=generation_mask(vocab))
    g_copy = ad.sigmoid(
        ad.matmul(s, params["s2s.copy.W"]) + ad.matmul(context, params["s2s.copy.U"]) + params["s2s.copy.b"]
    )
    p_copy = ad.scatter_add(alpha, source_ext_ids, n_extended)
    if n_extended > vocab:
        pad = Tensor(np.zeros(p_generate.shape[:-1] + (n_extended - vocab,)))
        p_gen_ext = ad.concat([p_generate, pad], axis=-1)
    else:
        p_gen_ext = p_generate
    p_final = g_copy * p_copy + (1.0 - g_copy) * p_gen_ext
    return StepOutput(alpha, context, p_generate, g_copy, p_copy, p_final)


def embed_targets(ids: np.ndarray, vocab_size: int, params: Params) -> Tensor:
    """Target embeddings; extended ids fall back to unk."""
    ids = np.where(ids >= vocab_size, UNK_ID, ids)
    return ad.gather_rows(params["s2s.dec.emb"], ids)


def decode_step(state: DecoderState, w_t_embedding: Tensor, H: Tensor, mask: np.ndarray, params: Params,
                source_ext_ids: np.ndarray, n_extended: int,
                UH: Optional[Tensor] = None) -> Tuple[StepOutput, DecoderState]:
    alpha, context, new_state = recurrent_step(state, w_t_embedding, H, mask, params, UH)
    out = output_distribution(new_state.s, context, alpha, source_ext_ids, n_extended, params)
    return out, new_state


def run_decoder(z: Tensor, H: Tensor, source_mask: np.ndarray, target_in_ids: np.ndarray,
                params: Params) -> DecoderTrace:
    """Teacher-forced recurrence over ``target_in_ids`` (B x T) from initial state ``z``."""
    vocab = params["s2s.dec.emb"].shape[0]
    emb = embed_targets(target_in_ids, vocab, params)
    UH = ad.matmul(H, params["s2s.att.U"])
    state = initial_state(z)
    S, C, A = [], [], []
    for t in range(target_in_ids.shape[1]):
        alpha, context, state = recurrent_step(state, emb[:, t], H, source_mask, params, UH)
        S.append(state.s)
        C.append(context)
        A.append(alpha)
    return DecoderTrace(ad.stack(S, axis=1), ad.stack(C, axis=1), ad.stack(A, axis=1))


def teacher_forced(batch: Batch, enc: EncoderOutput, params: Params) -> Tuple[DecoderTrace, StepOutput]:
    trace = run_decoder(enc.z, enc.H, batch.source_mask, batch.target_in_ids, params)
    out = output_distribution(trace.S, trace.C, trace.alphas, batch.source_ext_ids[:, None, :],
                              batch.n_extended, params)
    return trace, out


def nll_from_distribution(p_final: Tensor, gold: np.ndarray, mask: np.ndarray) -> NLLResult:
    """Mean of ``-log p_final(gold)`` over unmasked positions."""
    p_gold = ad.take_last(p_final, gold)
    floored = int(np.sum((p_gold.data <= PROB_FLOOR) & mask))
    logp = ad.log(ad.clamp_min(p_gold, PROB_FLOOR))
    m = mask.astype(float)
    tokens = int(m.sum())
    loss = ad.mul(ad.sum(logp * m), -1.0 / tokens)
    return NLLResult(loss, floored, tokens)


def sequence_nll(batch: Batch, params: Params, enc: Optional[EncoderOutput] = None) -> NLLResult:
    enc = enc if enc is not None else encode(batch, params)
    _, out = teacher_forced(batch, enc, params)
    return nll_from_distribution(out.p_final, batch.target_out_ids, batch.target_mask)


# ---------------------------------------------------------------------------
# inference


def _strip(ids: Sequence[int]) -> List[int]:
    out = []
    for i in ids:
        if i == EOS_ID:
            break
        out.append(i)
    return out


def _selection_scores(p_final: np.ndarray) -> np.ndarray:
    scores = p_final.copy()
    scores[..., [PAD_ID, SOS_ID]] = -np.inf
    return scores


def greedy_decode_batch(batch: Batch, params: Params, max_len: int, enc: Optional[EncoderOutput] = None
                        ) -> List[List[int]]:
    """Greedy (lowest id wins ties) ids per row, eos excluded, extended ids kept."""
    with ad.no_grad():
        enc = enc if enc is not None else encode(batch, params)
        vocab = params["s2s.dec.emb"].shape[0]
        UH = ad.matmul(enc.H, params["s2s.att.U"])
        state = initial_state(enc.z)
        prev = np.full(batch.size, SOS_ID)
        seqs: List[List[int]] = [[] for _ in range(batch.size)]
        done = np.zeros(batch.size, dtype=bool)
        for _ in range(max_len):
            out, state = decode_step(state, embed_targets(prev, vocab, params), enc.H, batch.source_mask,
                                     params, batch.source_ext_ids, batch.n_extended, UH)
            choice = np.argmax(_selection_scores(out.p_final.data), axis=-1)
            for r in np.flatnonzero(~done):
                if choice[r] == EOS_ID:
                    done[r] = True
                else:
                    seqs[r].append(int(choice[r]))
            if done.all():
                break
            prev = choice
    return seqs


@dataclass
class Hypothesis:
    score: float  # length-normalised log probability
    log_prob: float
    tokens: Tuple[int, ...]
    finished: bool = False


def beam_search(step: Callable[[object, int], Tuple[np.ndarray, object]], init_state, beam_size: int,
                max_len: int, bos: int = SOS_ID, eos: int = EOS_ID) -> Optional[Hypothesis]:
    """Length-normalised beam search.

    ``step(state, prev_token)`` returns ``(log_probs, new_state)``; ``-inf``
    entries are never expanded.  A hypothesis's score is its summed log
    probability divided by its token count (eos included).  Hypotheses that
    emit eos leave the beam; the search ends when the beam is empty or
    ``max_len`` tokens have been produced.  Candidates are ranked by score,
    ties resolved towards earlier beams and lower token ids.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len <= 0:
        return None
    beam = [(0.0, (), init_state, bos)]
    finished: List[Hypothesis] = []
    for t in range(max_len):
        candidates = []
        for b_idx, (lp, toks, state, prev) in enumerate(beam):
            log_probs, new_state = step(state, prev)
            for tok in np.flatnonzero(np.isfinite(log_probs)):
                total = lp + float(log_probs[tok])
                candidates.append(((-total / (t + 1), -total, b_idx, int(tok)), total, toks, new_state))
        best = heapq.nsmallest(beam_size, candidates, key=lambda c: c[0])
        beam = []
        for key, total, toks, new_state in best:
            tok = key[3]
            if tok == eos:
                finished.append(Hypothesis(-key[0], total, toks + (tok,), True))
            else:
                beam.append((total, toks + (tok,), new_state, tok))
        if not beam:
            break
    pool = finished + [Hypothesis(lp / len(toks), lp, toks) for lp, toks, _, _ in beam]
    # max score; earliest entry wins ties
    best = pool[0]
    for h in pool[1:]:
        if h.score > best.score:
            best = h
    return best


def beam_decode_batch(batch: Batch, params: Params, beam_size: int, max_len: int) -> List[List[int]]:
    """Beam search each row of ``batch`` independently; eos removed, extended ids kept."""
    with ad.no_grad():
        enc = encode(batch, params)
        vocab = params["s2s.dec.emb"].shape[0]
        results = []
        for row in range(batch.size):
            m = int(batch.source_lengths[row])
            H = enc.H[row: row + 1, :m]
            mask = batch.source_mask[row: row + 1, :m]
            ext = batch.source_ext_ids[row: row + 1, :m]
            n_ext = batch.target_vocab_size + len(batch.source_oov_maps[row])
            UH = ad.matmul(H, params["s2s.att.U"])

            def step(state, prev, H=H, mask=mask, ext=ext, n_ext=n_ext, UH=UH):
                emb = embed_targets(np.array([prev]), vocab, params)
                out, new_state = decode_step(state, emb, H, mask, params, ext, n_ext, UH)
                p = _selection_scores(out.p_final.data[0])
                with np.errstate(divide="ignore"):
                    return np.where(p > 0, np.log(np.maximum(p, 0.0)), -np.inf), new_state

            hyp = beam_search(step, initial_state(enc.z[row: row + 1]), beam_size, max_len)
            results.append([] if hyp is None else _strip(hyp.tokens))
    return results
