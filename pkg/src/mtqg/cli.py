"""Command-line entry point: ``mtqg train | generate | evaluate | gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import CorpusError, Vocab, Vocabs, build_vocabs, load_examples
from .encoder import EncoderConfig
from .trainer import CheckpointError, TrainConfig

logger = logging.getLogger("mtqg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# flag name -> (type, help); keys double as config-file keys
RUN_FLAGS = {
    "seed": (int, "random seed"),
    "alpha": (float, "semantic-match loss weight"),
    "beta": (float, "answer-position loss weight"),
    "lr": (float, "initial Adam learning rate"),
    "batch-size": (int, "mini-batch size"),
    "epochs": (int, "training epochs"),
    "patience": (int, "epochs without dev improvement before halving lr"),
    "max-grad-norm": (float, "clip gradients to this global norm"),
    "hidden": (int, "encoder hidden size per direction (decoder state is twice this)"),
    "d-w": (int, "word embedding size"),
    "d-feature": (int, "POS/NER/case/answer-position embedding size"),
    "max-source-vocab": (int, "source vocabulary cap"),
    "max-target-vocab": (int, "target vocabulary cap"),
    "min-count": (int, "minimum token frequency for the vocabularies"),
    "sm-pair-mode": (str, "negative-pair question vectors: rerun | reuse"),
    "beam": (int, "beam size for generation (1 = greedy)"),
    "max-len": (int, "maximum generated question length"),
    "train": (str, "training examples (JSON lines)"),
    "dev": (str, "dev examples (JSON lines)"),
    "checkpoint": (str, "checkpoint path"),
    "out": (str, "output path or directory"),
    "embeddings": (str, "pre-trained word vectors: 'token v1 ... vd' per line"),
}

DEFAULTS = {
    "seed": 0, "alpha": 1.0, "beta": 2.0, "lr": 0.001, "batch-size": 32, "epochs": 20, "patience": 1,
    "max-grad-norm": None, "hidden": 256, "d-w": 300, "d-feature": 16, "max-source-vocab": 45000,
    "max-target-vocab": 28000, "min-count": 1, "sm-pair-mode": "rerun", "beam": 1, "max-len": 20,
    "train": None, "dev": None, "checkpoint": None, "out": None, "embeddings": None,
}


def _norm(key: str) -> str:
    return key.replace("_", "-")


def load_config_file(path) -> Dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    out = {}
    for k, v in raw.items():
        key = _norm(k)
        if key not in RUN_FLAGS:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, (dict, list)):
            raise ConfigError(f"config key {k!r} must be a scalar")
        out[key] = v
    return out


def resolve_config(args: argparse.Namespace) -> Dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in RUN_FLAGS:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    for key, (typ, _) in RUN_FLAGS.items():
        if cfg[key] is not None:
            try:
                cfg[key] = typ(cfg[key])
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be {typ.__name__}, got {cfg[key]!r}") from None
    return cfg


def train_config(cfg: Dict) -> TrainConfig:
    try:
        return TrainConfig(alpha=cfg["alpha"], beta=cfg["beta"], lr=cfg["lr"], batch_size=cfg["batch-size"],
                           epochs=cfg["epochs"], seed=cfg["seed"], patience=cfg["patience"],
                           max_grad_norm=cfg["max-grad-norm"], max_len=cfg["max-len"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def encoder_config(cfg: Dict) -> EncoderConfig:
    f = cfg["d-feature"]
    try:
        return EncoderConfig(d_w=cfg["d-w"], d_p=f, d_n=f, d_c=f, d_ap=f, hidden=cfg["hidden"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_embeddings(path, vocab: Vocab, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` for tokens found in a plain-text vector file."""
    hits = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != table.shape[1] + 1 or parts[0] not in vocab:
                continue
            table[vocab.id(parts[0])] = np.asarray(parts[1:], dtype=float)
            hits += 1
    return hits


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .model import ModelConfig, QGModel
    from .trainer import train

    cfg = resolve_config(args)
    for key in ("train", "out"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    for key in ("train", "dev", "embeddings"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise ConfigError(f"--{key}: no such file {cfg[key]}")
    tcfg = train_config(cfg)
    ecfg = encoder_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    logger.info("effective config: %s", json.dumps(cfg, sort_keys=True))
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    train_set = load_examples(cfg["train"])
    dev_set = load_examples(cfg["dev"]) if cfg["dev"] else None
    vocabs = build_vocabs(train_set, cfg["max-source-vocab"], cfg["max-target-vocab"], cfg["min-count"])
    vocabs.save(out)
    try:
        model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, ecfg, cfg["sm-pair-mode"]), cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["embeddings"]:
        for name, vocab in (("s2s.emb.word", vocabs.source), ("s2s.dec.emb", vocabs.target)):
            n = load_embeddings(cfg["embeddings"], vocab, model.params[name].data)
            logger.info("loaded %d pre-trained vectors into %s", n, name)

    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"
    if ckpt.parent.resolve() != out.resolve():
        vocabs.save(ckpt.parent)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as log_fh:
        def on_log(rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["kind"] == "epoch":
                logger.info("epoch %s: %s", rec["epoch"], rec)

        train(tcfg, model, vocabs, train_set, dev_set, on_log=on_log, checkpoint_path=ckpt)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _vocabs_for(checkpoint: Path) -> Vocabs:
    """Vocabularies are stored beside the checkpoint by ``train``."""
    return Vocabs.load(checkpoint.parent)


def cmd_generate(args) -> int:
    from .model import ModelConfig, QGModel
    from .trainer import generate, load_checkpoint, read_checkpoint

    cfg = resolve_config(args)
    if not cfg["checkpoint"] or not args.input:
        raise ConfigError("--checkpoint and --input are required")
    if not Path(args.input).is_file():
        raise ConfigError(f"--input: no such file {args.input}")
    ckpt = Path(cfg["checkpoint"])
    header, _ = read_checkpoint(ckpt)
    vocabs = _vocabs_for(ckpt)
    # sizes come from the vocab files next to the checkpoint so a mismatch is reported per tensor
    stored = ModelConfig.from_dict(header["model_config"])
    model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, stored.encoder, stored.sm_pair_mode))
    load_checkpoint(ckpt, model)
    examples = load_examples(args.input)
    questions = generate(model, examples, vocabs, cfg["max-len"], beam=cfg["beam"]) if examples else []
    text = "".join(" ".join(q) + "\n" for q in questions)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, read_tokenized

    hyps = read_tokenized(args.hyp)
    refs = read_tokenized(args.ref)
    if len(hyps) != len(refs):
        print(f"error: {len(hyps)} hypotheses but {len(refs)} references", file=sys.stderr)
        return EXIT_USAGE
    vocab = Vocab.load(args.vocab) if args.vocab else None
    report = evaluate(hyps, refs, vocab).scaled()
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def run_gradcheck(d: int = 8, m: int = 5, n: int = 4, vocab: int = 20, batch: int = 2, seed: int = 0,
                  h: float = 1e-4, tol: float = 1e-4, alpha: float = 1.0, beta: float = 2.0) -> Dict:
    """Finite-difference check of every loss at tiny dimensions.

    Returns a mapping ``loss name -> GradCheckReport``.
    """
    from .corpus import make_batch, sample_sm_pairs
    from .model import ModelConfig, QGModel
    from .synthetic import random_examples
    from .trainer import total_loss

    rng = np.random.default_rng(seed)
    examples = random_examples(rng, batch, m, n, vocab_size=vocab - 4)
    vocabs = build_vocabs(examples, max_source_vocab=vocab - 4, max_target_vocab=vocab - 4)
    ecfg = EncoderConfig(d_w=4, d_p=2, d_n=2, d_c=2, d_ap=2, hidden=d // 2)
    mcfg = ModelConfig(encoder=ecfg, source_vocab=vocab, target_vocab=vocab,
                       pos_vocab=len(vocabs.features["pos"]), ner_vocab=len(vocabs.features["ner"]),
                       case_vocab=len(vocabs.features["case"]))
    # pad the vocabularies so |V| is exactly ``vocab``
    for v in (vocabs.source, vocabs.target):
        k = 0
        while len(v) < vocab:
            v.add(f"<fill{k}>")
            k += 1
    model = QGModel.initialize(mcfg, seed)
    # move parameters off the uniform(-0.1, 0.1) init so gradients are not tiny
    for p in model:
        p.data += rng.normal(0.0, 0.3, size=p.shape)
    b = make_batch(examples, vocabs)
    pairs = sample_sm_pairs(b, rng).pairs

    def losses():
        parts = total_loss(b, model, pairs, alpha, beta)
        fp = parts.forward
        return [fp.l_s2s, fp.l_sm, fp.l_ap, parts.total]

    names = ["sequence_nll", "sm_loss", "ap_loss", "total_loss"]
    numeric = ad.numeric_grads(losses, model.params, h)
    reports = {}
    for k, name in enumerate(names):
        analytic = ad.analytic_grads(lambda k=k: losses()[k], model.params)
        reports[name] = ad.compare_grads(analytic, numeric[k], tol)
    return reports


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    t0 = time.perf_counter()
    if args.inject_fault:
        with ad.inject_fault(args.inject_fault):
            reports = run_gradcheck(d=args.d, m=args.m, n=args.n, seed=cfg["seed"])
    else:
        reports = run_gradcheck(d=args.d, m=args.m, n=args.n, seed=cfg["seed"])
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name:14s} max rel err {rep.max_rel_error:.3e} (worst {rep.worst[0]}{list(rep.worst[1])})")
        if not rep.passed:
            ok = False
            print("    offending parameters: " + ", ".join(rep.failing()))
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    p.add_argument("--config", help="flat JSON file of flag values")
    for name in names:
        typ, help_text = RUN_FLAGS[name]
        p.add_argument(f"--{name}", type=typ, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtqg", description="Multi-task neural question generation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p, [k for k in RUN_FLAGS if k != "beam"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate one question per input record")
    _add_run_flags(p, ["seed", "checkpoint", "out", "beam", "max-len"])
    p.add_argument("--input", required=False, help="examples to generate for (JSON lines)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("hyp")
    p.add_argument("ref")
    p.add_argument("--vocab", help="target vocab file; enables OOV copy precision/recall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _add_run_flags(p, ["seed"])
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
