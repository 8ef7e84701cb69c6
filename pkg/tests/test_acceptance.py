"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from mtqg import answer_position, autodiff as ad, cli, corpus, decoder, metrics, trainer
from mtqg.encoder import EncoderConfig
from mtqg.model import ModelConfig, QGModel
from mtqg.synthetic import random_examples, toy_corpus
from mtqg.trainer import TrainConfig

from conftest import record_criterion

# -- shared toy-corpus runs (criteria 5 and 8) --------------------------------

TOY_ENCODER = EncoderConfig(d_w=16, d_p=4, d_n=4, d_c=4, d_ap=4, hidden=24)
TOY_TRAIN = dict(lr=0.02, batch_size=16, epochs=300, seed=0, max_grad_norm=5.0)


def toy_run(alpha, beta):
    examples = toy_corpus()
    vocabs = corpus.build_vocabs(examples, min_count=2)
    model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, TOY_ENCODER), 0)
    t0 = time.perf_counter()
    trainer.train(TrainConfig(alpha=alpha, beta=beta, **TOY_TRAIN), model, vocabs, examples)
    seconds = time.perf_counter() - t0
    acc = trainer.task_accuracy(model, examples, vocabs, seed=123)
    hyps = trainer.generate(model, examples, vocabs, max_len=20)
    return {
        "seconds": seconds,
        "l_s2s": acc.l_s2s,
        "span_exact": acc.span_exact,
        "sm_sampled": acc.sm_accuracy,
        "sm_balanced": trainer.sm_balanced_accuracy(model, examples, vocabs),
        "exact": sum(h == ex.question_tokens for h, ex in zip(hyps, examples)),
    }


@pytest.fixture(scope="module")
def toy_runs():
    settings = {"full": (1.0, 2.0), "no_ap": (1.0, 0.0), "no_sm": (0.0, 2.0)}
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=len(settings), mp_context=ctx) as pool:
        futures = {k: pool.submit(toy_run, *v) for k, v in settings.items()}
        return {k: f.result() for k, f in futures.items()}


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    reports = cli.run_gradcheck(d=8, m=5, n=4, vocab=20, batch=2, tol=1e-4)
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values()) and seconds < 60
    detail = ", ".join(f"{k} {r.max_rel_error:.1e}" for k, r in reports.items()) + f"; {seconds:.1f}s"
    assert record_criterion(1, "gradient suite, max rel err <= 1e-4 in < 60 s", ok, detail), (worst, seconds)


# -- 2 ------------------------------------------------------------------------


def _normalisation_errors(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    m, q = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    examples = random_examples(rng, n, m, q, vocab_size=int(rng.integers(4, 12)))
    vocabs = corpus.build_vocabs(examples, max_target_vocab=int(rng.integers(2, 10)))
    enc = EncoderConfig(d_w=3, d_p=2, d_n=2, d_c=2, d_ap=2, hidden=int(rng.integers(1, 4)))
    model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, enc), seed)
    for p in model:
        p.data += rng.normal(0.0, 1.0, size=p.shape)
    batch = corpus.make_batch(examples, vocabs)
    pairs = corpus.sample_sm_pairs(batch, rng).pairs
    with ad.no_grad():
        fp = model.forward(batch, pairs)
    step = fp.step
    smask = np.broadcast_to(batch.source_mask[:, None, :], step.alpha.shape)
    # ids past a row's own extended range, plus pad and sos, can never be emitted
    n_row = batch.target_vocab_size + np.array([len(o) for o in batch.source_oov_maps])
    ids = np.arange(batch.n_extended)
    final_mask = (ids[None, :] < n_row[:, None])[:, None, :].repeat(step.p_final.shape[1], axis=1)
    final_mask[..., [corpus.PAD_ID, corpus.SOS_ID]] = False
    gen_mask = decoder.generation_mask(step.p_generate.shape[-1])
    checks = [
        (step.alpha.data, smask),
        (step.p_generate.data, np.broadcast_to(gen_mask, step.p_generate.shape)),
        (step.p_final.data, final_mask),
        (fp.sm.probs.data, np.ones_like(fp.sm.probs.data, dtype=bool)),
        (fp.span.p1.data, batch.source_mask),
        (fp.span.p2.data, batch.source_mask),
    ]
    sum_err = max(float(np.max(np.abs(p.sum(-1) - 1.0))) for p, _ in checks)
    leak = max(float(np.max(np.abs(p[~mk]), initial=0.0)) for p, mk in checks)
    return sum_err, leak


def test_criterion_2_normalisation():
    errs = [_normalisation_errors(seed) for seed in range(100)]
    sum_err = max(e[0] for e in errs)
    leak = max(e[1] for e in errs)
    ok = sum_err <= 1e-6 and leak == 0.0
    detail = f"100 fixtures, max |sum-1| {sum_err:.1e}, max masked mass {leak:.1e}"
    assert record_criterion(2, "every softmax sums to 1 and is zero where masked", ok, detail)


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_copy_mixture():
    worst, checked = 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        # a tiny target vocab and a small source alphabet force repeated OOVs
        examples = random_examples(rng, 3, 8, 3, vocab_size=4)
        vocabs = corpus.build_vocabs(examples, max_target_vocab=1)
        model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, EncoderConfig(3, 2, 2, 2, 2, hidden=3)), seed)
        for p in model:
            p.data += rng.normal(0.0, 1.0, size=p.shape)
        batch = corpus.make_batch(examples, vocabs)
        with ad.no_grad():
            enc = model.encode(batch)
            _, out = decoder.teacher_forced(batch, enc, model.params)
        g = out.g_copy.data[..., 0]
        for r in range(batch.size):
            for e in batch.source_oov_maps[r].values():
                hit = batch.source_ext_ids[r] == e
                want = g[r] * out.alpha.data[r][:, hit].sum(-1)
                worst = max(worst, float(np.max(np.abs(out.p_final.data[r, :, e] - want))))
                checked += 1
    ok = worst <= 1e-12 and checked > 0
    detail = f"{checked} extended ids, max |p_final - g*sum(alpha)| {worst:.1e}"
    assert record_criterion(3, "copy mass on extended ids is exact", ok, detail)


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_loss_composition(tiny):
    _, _, model, batch = tiny
    cfg = TrainConfig()
    pairs = corpus.sample_sm_pairs(batch, np.random.default_rng(0)).pairs
    parts = trainer.total_loss(batch, model, pairs, cfg.alpha, cfg.beta)
    expected = parts.s2s + cfg.alpha * parts.sm + cfg.beta * parts.ap
    ok = (cfg.alpha, cfg.beta) == (1.0, 2.0) and float(parts.total.data) == expected
    detail = f"alpha={cfg.alpha}, beta={cfg.beta}, total={float(parts.total.data):.12g}, sum={expected:.12g}"
    assert record_criterion(4, "total = L_s2s + alpha L_sm + beta L_ap with defaults", ok, detail)


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_overfit(toy_runs):
    r = toy_runs["full"]
    ok = (r["l_s2s"] < 0.1 and r["sm_balanced"] >= 0.95 and r["span_exact"] == 1.0 and r["exact"] >= 30
          and r["seconds"] < 600)
    detail = (f"L_s2s {r['l_s2s']:.4f}, SM acc {r['sm_balanced']:.3f} over all pairs "
              f"({r['sm_sampled']:.3f} on a sampled set), span EM {r['span_exact']:.2f}, "
              f"greedy exact {r['exact']}/32, {r['seconds']:.0f}s")
    assert record_criterion(5, "32-example overfit in 300 epochs", ok, detail)


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_span_oracle():
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(1000):
        m = int(rng.integers(1, 31))
        p1, p2 = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(m))
        best, arg = -1.0, None
        for i in range(m):
            for j in range(i, m):
                if p1[i] * p2[j] > best:
                    best, arg = p1[i] * p2[j], (i, j)
        agree += answer_position.predict_span(p1, p2) == arg
    assert record_criterion(6, "predict_span equals exhaustive i <= j argmax", agree == 1000, f"{agree}/1000 agree")


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_metric_oracles():
    t = str.split
    cases = {
        "clipped unigram precision": (
            metrics.ngram_matches([t("the the the")], [t("the cat")], 1), (1, 3)),
        "BLEU identical": (metrics.bleu([t("a b c d e")], [t("a b c d e")]), 1.0),
        "BLEU empty hypothesis": (metrics.bleu([[]], [t("a b")]), 0.0),
        "BLEU-4 worked": (metrics.bleu([t("a b c d")], [t("a b c e")]), (3 / 4 * 2 / 3 * 1 / 2 * 1 / 2) ** 0.25),
        "ROUGE-L identical": (metrics.rouge_l([t("a b")], [t("a b")]), 1.0),
        "ROUGE-L worked": (metrics.rouge_l([t("a b c")], [t("a c")]), 2.2 * (2 / 3) * 1.0 / (1.0 + 1.2 * 2 / 3)),
        "ROUGE-L disjoint": (metrics.rouge_l([t("a b")], [t("c d")]), 0.0),
        "copy shared": (metrics.copy_precision_recall([t("x y")], [t("y x")], set()), (1.0, 1.0)),
        "copy 2 vs 4": (metrics.copy_precision_recall([t("who x y")], [t("who x p q r")], {"who"}), (0.5, 0.25)),
        "copy none": (metrics.copy_precision_recall([t("who")], [t("who")], {"who"}), (None, None)),
    }
    bad = []
    for name, (got, want) in cases.items():
        if isinstance(want, tuple):
            good = got == want
        else:
            good = abs(got - want) <= 1e-9
        if not good:
            bad.append(f"{name}: {got} != {want}")
    detail = f"{len(cases) - len(bad)}/{len(cases)} worked examples" + (f"; {bad}" if bad else "")
    assert record_criterion(7, "metric oracles", not bad, detail)


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_ablation(toy_runs):
    full, no_ap, no_sm = toy_runs["full"], toy_runs["no_ap"], toy_runs["no_sm"]
    ok = full["span_exact"] >= no_ap["span_exact"] and full["sm_balanced"] >= no_sm["sm_balanced"]
    detail = (f"span EM {full['span_exact']:.3f} (beta=2) vs {no_ap['span_exact']:.3f} (beta=0); "
              f"SM acc {full['sm_balanced']:.3f} (alpha=1) vs {no_sm['sm_balanced']:.3f} (alpha=0)")
    assert record_criterion(8, "auxiliary losses do not hurt their own task", ok, detail)


# -- 9 ------------------------------------------------------------------------


def test_criterion_9_determinism_and_round_trip(tmp_path):
    examples = toy_corpus()[:8]
    vocabs = corpus.build_vocabs(examples)
    enc = EncoderConfig(d_w=6, d_p=2, d_n=2, d_c=2, d_ap=2, hidden=4)

    def run():
        model = QGModel.initialize(ModelConfig.for_vocabs(vocabs, enc), 3)
        res = trainer.train(TrainConfig(seed=3, epochs=3, batch_size=4, lr=0.01), model, vocabs, examples)
        return model, res.log

    m1, log1 = run()
    _, log2 = run()
    path = tmp_path / "a.ckpt"
    trainer.save_checkpoint(path, m1)
    back, _ = trainer.model_from_checkpoint(path)
    exact = all(back.params[k].data.tobytes() == p.data.tobytes() for k, p in m1.params.items())
    resaved = tmp_path / "b.ckpt"
    trainer.save_checkpoint(resaved, back)
    same_file = path.read_bytes() == resaved.read_bytes()
    ok = log1 == log2 and exact and same_file
    detail = f"identical logs: {log1 == log2} ({len(log1)} records), bit-exact reload: {exact and same_file}"
    assert record_criterion(9, "fixed-seed determinism and checkpoint round-trip", ok, detail)
