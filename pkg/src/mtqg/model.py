"""Parameter container and the shared forward pass over all three tasks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import answer_position, decoder, encoder, semantic_match
from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, Vocabs
from .encoder import EncoderConfig, EncoderOutput

PAIR_MODES = ("rerun", "reuse")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and vocabulary sizes.

    ``sm_pair_mode`` selects how a negative (sentence i, question j) pair gets
    its question vector: ``"rerun"`` runs the decoder over question j starting
    from sentence i's state, ``"reuse"`` takes question j's vector from its own
    teacher-forced pass.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    source_vocab: int = 20
    target_vocab: int = 20
    pos_vocab: int = 8
    ner_vocab: int = 8
    case_vocab: int = 8
    sm_pair_mode: str = "rerun"

    def __post_init__(self):
        if self.sm_pair_mode not in PAIR_MODES:
            raise ValueError(f"sm_pair_mode must be one of {PAIR_MODES}")

    @property
    def state_dim(self) -> int:
        return self.encoder.state_dim

    @classmethod
    def for_vocabs(cls, vocabs: Vocabs, enc: EncoderConfig, sm_pair_mode: str = "rerun") -> "ModelConfig":
        return cls(
            encoder=enc,
            source_vocab=len(vocabs.source),
            target_vocab=len(vocabs.target),
            pos_vocab=len(vocabs.features["pos"]),
            ner_vocab=len(vocabs.features["ner"]),
            case_vocab=len(vocabs.features["case"]),
            sm_pair_mode=sm_pair_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class ForwardPass:
    enc: EncoderOutput
    trace: decoder.DecoderTrace
    step: decoder.StepOutput  # B x T x ... distributions
    nll: decoder.NLLResult
    sm: semantic_match.SMResult
    span: answer_position.SpanOutput
    l_ap: Tensor
    pairs: List[Tuple[int, int, int]]

    @property
    def l_s2s(self) -> Tensor:
        return self.nll.loss

    @property
    def l_sm(self) -> Tensor:
        return self.sm.loss


class QGModel:
    """All trainable tensors, keyed ``s2s.*``, ``sm.*`` and ``ap.*``."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "QGModel":
        rng = np.random.default_rng(seed)
        e = config.encoder
        d = e.state_dim
        raw = {}
        raw.update(encoder.init_params(e, {
            "source": config.source_vocab, "pos": config.pos_vocab,
            "ner": config.ner_vocab, "case": config.case_vocab,
        }, rng))
        raw.update(decoder.init_params(e.d_w, d, config.target_vocab, rng))
        raw.update(semantic_match.init_params(d, rng))
        raw.update(answer_position.init_params(d, rng))
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})

    def group(self, prefix: str) -> Dict[str, Tensor]:
        """Parameters of one partition: ``"s2s"``, ``"sm"`` or ``"ap"``."""
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] == prefix}

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def zero_grads(self) -> None:
        ad.zero_grads(self.params.values())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: Dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data[...] = v

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # ------------------------------------------------------------------

    def encode(self, batch: Batch) -> EncoderOutput:
        return encoder.encode(batch, self.params)

    def negative_question_vectors(self, batch: Batch, enc: EncoderOutput,
                                  pairs: Sequence[Tuple[int, int, int]]) -> Tensor:
        """Question vectors for pairs with ``i != j`` by re-running the decoder on
        question ``j`` from sentence ``i``'s state and attention memory."""
        si = np.array([p[0] for p in pairs])
        qi = np.array([p[1] for p in pairs])
        trace = decoder.run_decoder(enc.z[si], enc.H[si], batch.source_mask[si], batch.target_in_ids[qi],
                                    self.params)
        return semantic_match.question_vector(trace.S, batch.target_mask[qi])

    def forward(self, batch: Batch, pairs: Sequence[Tuple[int, int, int]]) -> ForwardPass:
        """One pass shared by the generation, matching and span losses."""
        params = self.params
        enc = encoder.encode(batch, params)
        trace, step = decoder.teacher_forced(batch, enc, params)
        nll = decoder.nll_from_distribution(step.p_final, batch.target_out_ids, batch.target_mask)
        s_n = semantic_match.question_vector(trace.S, batch.target_mask)

        pairs = list(pairs)
        if self.config.sm_pair_mode == "reuse" or not pairs:
            sm = semantic_match.sm_loss(pairs, enc.z, s_n, params)
        else:
            same = [p for p in pairs if p[0] == p[1]]
            cross = [p for p in pairs if p[0] != p[1]]
            ordered = same + cross
            z_rows = enc.z[np.array([p[0] for p in ordered])]
            q_parts = []
            if same:
                q_parts.append(s_n[np.array([p[1] for p in same])])
            if cross:
                q_parts.append(self.negative_question_vectors(batch, enc, cross))
            q_rows = q_parts[0] if len(q_parts) == 1 else ad.concat(q_parts, axis=0)
            sm = semantic_match.sm_loss_from_vectors(z_rows, q_rows, [p[2] for p in ordered], params)
            pairs = ordered

        span = answer_position.forward(enc.H, trace.S, batch.source_mask, batch.target_mask, params)
        l_ap = answer_position.ap_loss(span.p1, span.p2, batch.answer_starts, batch.answer_ends, batch.source_mask)
        return ForwardPass(enc, trace, step, nll, sm, span, l_ap, pairs)
