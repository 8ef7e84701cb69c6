import json
import subprocess
import sys

import numpy as np
import pytest

from mtqg import cli, corpus, trainer
from mtqg.synthetic import random_examples, toy_corpus

SMALL = ["--hidden", "4", "--d-w", "4", "--d-feature", "2", "--batch-size", "4", "--epochs", "2", "--lr", "0.01"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "train.jsonl"
    corpus.save_examples(random_examples(np.random.default_rng(0), 6, 5, 4), path)
    return path


def train_run(tmp_path, data, name="run", extra=()):
    out = tmp_path / name
    code = cli.main(["train", "--train", str(data), "--out", str(out), *SMALL, *extra])
    return code, out


def test_train_writes_artifacts(tmp_path, data):
    code, out = train_run(tmp_path, data)
    assert code == 0
    for f in ("model.ckpt", "metrics.jsonl", "config.json", "vocab.source.txt", "vocab.target.txt"):
        assert (out / f).is_file()
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records if r["kind"] == "epoch"] == [1, 2]


def test_train_missing_data_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--train", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert "no such file" in capsys.readouterr().err


def test_invalid_settings_are_usage_errors(tmp_path, data):
    assert train_run(tmp_path, data, extra=["--lr", "-1"])[0] == 2
    assert train_run(tmp_path, data, extra=["--sm-pair-mode", "bogus"])[0] == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert train_run(tmp_path, data, extra=["--config", str(cfg)])[0] == 2


def test_corrupt_data_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": ["a"]}\n')
    assert cli.main(["train", "--train", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_flags_override_config_file(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "lr": 0.5, "seed": 3}))
    code, out = train_run(tmp_path, data, extra=["--config", str(cfg)])
    assert code == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["epochs"] == 2 and echo["lr"] == 0.01 and echo["seed"] == 3


def test_config_echo_replays_run_exactly(tmp_path, data):
    _, first = train_run(tmp_path, data, extra=["--seed", "5"])
    echo = json.loads((first / "config.json").read_text())
    echo["out"] = str(tmp_path / "replay")
    replay_cfg = tmp_path / "replay.json"
    replay_cfg.write_text(json.dumps(echo))
    assert cli.main(["train", "--config", str(replay_cfg)]) == 0
    second = tmp_path / "replay"
    assert (first / "metrics.jsonl").read_bytes() == (second / "metrics.jsonl").read_bytes()
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()


def test_zero_weights_train_backbone_only(tmp_path, data):
    code, out = train_run(tmp_path, data, extra=["--alpha", "0", "--beta", "0"])
    assert code == 0
    model, header = trainer.model_from_checkpoint(out / "model.ckpt")
    from mtqg.model import ModelConfig, QGModel

    fresh = QGModel.initialize(ModelConfig.from_dict(header["model_config"]), 0)
    for k in model.params:
        same = np.array_equal(model.params[k].data, fresh.params[k].data)
        assert same == (not k.startswith("s2s."))


def test_generate(tmp_path, data, capsys):
    _, out = train_run(tmp_path, data)
    capsys.readouterr()
    ckpt = str(out / "model.ckpt")
    assert cli.main(["generate", "--checkpoint", ckpt, "--input", str(data)]) == 0
    greedy = capsys.readouterr().out
    assert len(greedy.splitlines()) == 6
    assert cli.main(["generate", "--checkpoint", ckpt, "--input", str(data), "--beam", "1"]) == 0
    assert capsys.readouterr().out == greedy
    target = tmp_path / "gen.txt"
    assert cli.main(["generate", "--checkpoint", ckpt, "--input", str(data), "--out", str(target)]) == 0
    assert target.read_text() == greedy
    assert cli.main(["generate", "--checkpoint", ckpt, "--input", str(data), "--beam", "3"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 6


def test_generate_empty_input(tmp_path, data, capsys):
    _, out = train_run(tmp_path, data)
    capsys.readouterr()
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["generate", "--checkpoint", str(out / "model.ckpt"), "--input", str(empty)]) == 0
    assert capsys.readouterr().out == ""


def test_generate_shape_mismatch_names_tensor(tmp_path, data, capsys):
    _, out = train_run(tmp_path, data)
    # one extra target word makes the decoder tables disagree with the checkpoint
    with open(out / "vocab.target.txt", "a") as fh:
        fh.write("extra\n")
    assert cli.main(["generate", "--checkpoint", str(out / "model.ckpt"), "--input", str(data)]) == 1
    assert "s2s.dec.emb" in capsys.readouterr().err


def test_embeddings_are_loaded(tmp_path, data):
    vectors = tmp_path / "vec.txt"
    words = {t for ex in corpus.load_examples(data) for t in ex.sentence_tokens}
    w = sorted(words)[0]
    vectors.write_text(f"{w} 9 9 9 9\nshort 1 2\n")
    code, out = train_run(tmp_path, data, extra=["--embeddings", str(vectors), "--epochs", "0"])
    assert code == 0
    model, _ = trainer.model_from_checkpoint(out / "model.ckpt")
    vocabs = corpus.Vocabs.load(out)
    assert model.params["s2s.emb.word"].data[vocabs.source.id(w)].tolist() == [9, 9, 9, 9]


def test_evaluate(tmp_path, capsys):
    hyp, ref = tmp_path / "h.txt", tmp_path / "r.txt"
    hyp.write_text("who wrote the book ?\nwhere is it\n")
    ref.write_text("who wrote the book ?\nwhere was it built\n")
    assert cli.main(["evaluate", str(hyp), str(hyp)]) == 0
    assert json.loads(capsys.readouterr().out)["bleu4"] == pytest.approx(100.0)
    assert cli.main(["evaluate", str(hyp), str(ref), "--out", str(tmp_path / "rep.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    # clipped unigrams: 5 of 5 plus 2 of 3; corpus lengths 8 vs 9
    assert report["bleu1"] == pytest.approx(100 * 7 / 8 * np.exp(1 - 9 / 8), abs=1e-9)
    assert json.loads((tmp_path / "rep.json").read_text()) == report


def test_evaluate_with_vocab(tmp_path, capsys):
    hyp, ref, vocab = tmp_path / "h.txt", tmp_path / "r.txt", tmp_path / "v.txt"
    hyp.write_text("who wrote zed ?\n")
    ref.write_text("who wrote zed ?\n")
    corpus.Vocab(["who", "wrote", "?"]).save(vocab)
    assert cli.main(["evaluate", str(hyp), str(ref), "--vocab", str(vocab)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["copy_precision"] == 100.0 and report["copy_recall"] == 100.0


def test_evaluate_line_mismatch(tmp_path):
    hyp, ref = tmp_path / "h.txt", tmp_path / "r.txt"
    hyp.write_text("a\nb\n")
    ref.write_text("a\n")
    assert cli.main(["evaluate", str(hyp), str(ref)]) == 2


def test_gradcheck_pass_and_negative_control(capsys):
    assert cli.main(["gradcheck", "--d", "4", "--m", "3", "--n", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS") for line in lines) == 4
    assert cli.main(["gradcheck", "--d", "4", "--m", "3", "--n", "2", "--inject-fault", "sigmoid"]) == 1
    text = capsys.readouterr().out
    assert "FAIL" in text and "offending parameters" in text


def test_module_entry_point(tmp_path):
    hyp = tmp_path / "h.txt"
    hyp.write_text("a b\n")
    proc = subprocess.run([sys.executable, "-m", "mtqg.cli", "evaluate", str(hyp), str(hyp)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["rouge_l"] == pytest.approx(100.0)
    proc = subprocess.run([sys.executable, "-m", "mtqg.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_overfit_checkpoint_reproduces_training_questions(tmp_path, capsys):
    examples = toy_corpus()[:4]
    path = tmp_path / "toy.jsonl"
    corpus.save_examples(examples, path)
    out = tmp_path / "toy"
    args = ["train", "--train", str(path), "--out", str(out), "--hidden", "16", "--d-w", "8", "--d-feature", "2",
            "--batch-size", "4", "--epochs", "300", "--lr", "0.02", "--max-grad-norm", "5"]
    assert cli.main(args) == 0
    capsys.readouterr()
    assert cli.main(["generate", "--checkpoint", str(out / "model.ckpt"), "--input", str(path)]) == 0
    generated = [line.split() for line in capsys.readouterr().out.splitlines()]
    assert generated == [ex.question_tokens for ex in examples]
