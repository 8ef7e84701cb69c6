"""Joint multi-task training: total loss, Adam, learning-rate halving, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch, Example, Vocabs, iter_batches, make_batch, sample_sm_pairs
from .model import ForwardPass, ModelConfig, QGModel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MTQGCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.step = step
        self.component = component
        self.value = value


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not fit the model."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 2.0
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int = 1
    max_grad_norm: Optional[float] = None
    max_len: int = 20
    prefer_same_passage: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")


@dataclass
class LossParts:
    total: Tensor
    s2s: float
    sm: float
    ap: float
    forward: ForwardPass

    def as_dict(self) -> Dict[str, float]:
        return {"loss": float(self.total.data), "l_s2s": self.s2s, "l_sm": self.sm, "l_ap": self.ap}


def total_loss(batch: Batch, model: QGModel, pairs: Sequence[Tuple[int, int, int]], alpha: float, beta: float,
               step: int = 0) -> LossParts:
    """``L_s2s + alpha * L_sm + beta * L_ap`` from a single shared forward pass.

    Raises:
        NonFiniteLossError: naming the first non-finite component.
    """
    fp = model.forward(batch, pairs)
    parts = {"s2s": fp.l_s2s, "sm": fp.l_sm, "ap": fp.l_ap}
    for name, t in parts.items():
        if not np.isfinite(t.data):
            raise NonFiniteLossError(step, name, float(t.data))
    total = fp.l_s2s
    if alpha:
        total = total + ad.mul(fp.l_sm, alpha)
    if beta:
        total = total + ad.mul(fp.l_ap, beta)
    return LossParts(total, float(fp.l_s2s.data), float(fp.l_sm.data), float(fp.l_ap.data), fp)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; parameters without a gradient are skipped."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: QGModel, meta: Optional[dict] = None) -> None:
    """Header (magic, version, JSON index of names and shapes) then little-endian f64 data."""
    index = [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()]
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "tensors": index,
        "model_config": model.config.to_dict(),
        "meta": meta or {},
    }).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return header, tensors


def load_checkpoint(path, model: QGModel) -> dict:
    """Copy checkpoint tensors into ``model``; returns the header.

    Raises:
        CheckpointError: naming the first tensor that is missing or mis-shaped.
    """
    header, tensors = read_checkpoint(path)
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape} in checkpoint, model expects {p.shape}"
            )
    for name, p in model.params.items():
        p.data[...] = tensors[name]
    return header


def model_from_checkpoint(path) -> Tuple[QGModel, dict]:
    header, _ = read_checkpoint(path)
    model = QGModel.initialize(ModelConfig.from_dict(header["model_config"]))
    load_checkpoint(path, model)
    return model, header


# ---------------------------------------------------------------------------
# evaluation helpers


def generate(model: QGModel, examples: Sequence[Example], vocabs: Vocabs, max_len: int, beam: int = 1,
             batch_size: int = 64) -> List[List[str]]:
    from .decoder import beam_decode_batch, greedy_decode_batch

    out = []
    for start in range(0, len(examples), batch_size):
        chunk = list(examples[start: start + batch_size])
        batch = make_batch(chunk, vocabs, with_targets=False)
        if beam <= 1:
            ids = greedy_decode_batch(batch, model.params, max_len)
        else:
            ids = beam_decode_batch(batch, model.params, beam, max_len)
        out.extend(batch.decode(r, seq, vocabs.target) for r, seq in enumerate(ids))
    return out


@dataclass
class TaskAccuracy:
    sm_accuracy: float
    span_exact: float
    l_s2s: float


def task_accuracy(model: QGModel, examples: Sequence[Example], vocabs: Vocabs, seed: int = 0,
                  batch_size: int = 64) -> TaskAccuracy:
    """Semantic-match accuracy over freshly sampled pairs, span exact match and per-token NLL."""
    from .answer_position import predict_span

    rng = np.random.default_rng(seed)
    correct_sm = total_sm = exact = tokens = 0
    nll_sum = 0.0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start: start + batch_size], vocabs)
            fp = model.forward(batch, sample_sm_pairs(batch, rng).pairs)
            pred = np.argmax(fp.sm.probs.data, axis=-1)
            correct_sm += int(np.sum(pred == fp.sm.labels))
            total_sm += len(fp.sm.labels)
            for r in range(batch.size):
                i, j = predict_span(fp.span.p1.data[r], fp.span.p2.data[r])
                exact += int(i == batch.answer_starts[r] and j == batch.answer_ends[r])
            nll_sum += float(fp.l_s2s.data) * fp.nll.tokens
            tokens += fp.nll.tokens
    return TaskAccuracy(correct_sm / max(total_sm, 1), exact / len(examples), nll_sum / tokens)


def sm_balanced_accuracy(model: QGModel, examples: Sequence[Example], vocabs: Vocabs) -> float:
    """Mean of positive-pair and negative-pair accuracy over every ordered pair in ``examples``.

    This is the expected accuracy under the training sampler's 1:1 mix, without
    sampling noise.  All pairs go through one batch, so keep ``examples`` small.
    """
    batch = make_batch(list(examples), vocabs)
    n = batch.size
    pairs = [(i, j, int(i == j)) for i in range(n) for j in range(n)]
    with ad.no_grad():
        fp = model.forward(batch, pairs)
    pred = np.argmax(fp.sm.probs.data, axis=-1)
    labels = np.asarray(fp.sm.labels)
    hit = pred == labels
    if n == 1:
        return float(hit.mean())
    return 0.5 * (float(hit[labels == 1].mean()) + float(hit[labels == 0].mean()))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: QGModel
    log: List[dict]
    best_dev: Optional[float]
    best_snapshot: Dict[str, np.ndarray]
    lr: float


def train(config: TrainConfig, model: QGModel, vocabs: Vocabs, train_set: Sequence[Example],
          dev_set: Optional[Sequence[Example]] = None,
          on_log: Optional[Callable[[dict], None]] = None,
          checkpoint_path=None) -> TrainResult:
    """Epoch loop over seeded shuffles; dev BLEU-4 drives lr halving and best-model selection.

    With a dev set the model ends holding the best-dev parameters; without
    one the final parameters are kept.
    """
    from .metrics import bleu

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    lr = config.lr
    log: List[dict] = []
    best_dev: Optional[float] = None
    best = model.snapshot()
    stale = 0
    step = 0

    def emit(rec):
        log.append(rec)
        if on_log is not None:
            on_log(rec)

    for epoch in range(1, config.epochs + 1):
        for chunk in iter_batches(train_set, config.batch_size, rng):
            batch = make_batch(chunk, vocabs)
            pairs = sample_sm_pairs(batch, rng, config.prefer_same_passage).pairs
            step += 1
            parts = total_loss(batch, model, pairs, config.alpha, config.beta, step)
            model.zero_grads()
            ad.backward(parts.total)
            if config.max_grad_norm is not None:
                clip_grad_norm(model.params, config.max_grad_norm)
            adam_step(model.params, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            emit({"kind": "step", "epoch": epoch, "step": step, "lr": lr, **parts.as_dict(),
                  "sm_acc": parts.forward.sm.accuracy})
        rec = {"kind": "epoch", "epoch": epoch, "step": step, "lr": lr}
        if dev_set:
            hyps = generate(model, dev_set, vocabs, config.max_len)
            score = bleu(hyps, [ex.question_tokens for ex in dev_set], 4)
            rec["dev_bleu4"] = score
            if best_dev is None or score > best_dev:
                best_dev, best, stale = score, model.snapshot(), 0
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, {"epoch": epoch, "dev_bleu4": score})
            else:
                stale += 1
                if stale >= config.patience:
                    lr /= 2.0
                    stale = 0
                    rec["lr_halved_to"] = lr
        else:
            best = model.snapshot()
        emit(rec)
    if dev_set:
        model.load_snapshot(best)
    elif checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"epoch": config.epochs})
    return TrainResult(model, log, best_dev, best, lr)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
