"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together when the
module finishes.  Run alone with `pytest tests/test_acceptance.py -v` or
`python3 tests/test_acceptance.py`.  Criterion 6 trains four models on the
full synthetic corpus and takes several minutes.
"""
import itertools
import math
import re
import time

import numpy as np
import pytest

from vdc import diffcore as dc
from vdc.checkpoint import from_bytes, to_bytes
from vdc.cli import main
from vdc.data import EOS_ID, PAD_ID, SynthConfig, Vocab, synth_generate, tokenize
from vdc.decoder import (CaptionModel, DecoderConfig, attention_scores, attention_weights,
                         context_attention, context_mean)
from vdc.diffcore import Graph, ParamStore
from vdc.encoder import Conv3DConfig, Conv3DNet, encode, motion_map
from vdc.inference import beam_search, capture_attention, greedy_decode, sequence_logprob
from vdc.metrics import bleu, cider, cider_scores, perplexity
from vdc.trainer import (AdadeltaState, Example, TrainConfig, adadelta_update, classifier_accuracy,
                         nll_loss, sgd_momentum_update, train, train_classifier)

# pinned tolerances and thresholds
GRAD_TOL, GRAD_SECONDS = 1e-4, 60.0
ALPHA_SUM_TOL = 1e-6
METRIC_TOL, PPL_UNIFORM_TOL = 1e-9, 1e-6
ATTN_GAIN = 0.10  # attention at least 10% lower perplexity than basic
TREND_SECONDS = 30 * 60.0
ALIGN_MIN, ALIGN_WINDOW = 0.70, 1
OPT_TOL = 1e-12
CLS_ACC, CLS_SECONDS = 0.95, 300.0

# shared desk-scale training config for the four variants
TREND_CONFIG = dict(d_emb=32, d_h=64, d_att=32, d_out=64, batch_size=32, max_updates=6000,
                    patience_updates=2000, valid_every=200, seed=0)
MOTION_CONV = dict(in_channels=4, channels=(8, 8, 16), pools=((2, 2, 2), (1, 1, 2), (1, 1, 2)))

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    write = tr.write_line if tr is not None else print
    write("")
    write("acceptance summary")
    for n in sorted(RESULTS):
        write(RESULTS[n])


# --- 1 ----------------------------------------------------------------------

def test_c01_grad_check(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["grad-check", "--d-emb", "8", "--d-h", "10", "--d-v", "12", "--n", "5",
                 "--vocab", "20", "--length", "4", "--eps", "1e-5", "--out", str(tmp_path)])
    seconds = time.perf_counter() - t0
    out = capsys.readouterr().out
    err = float(re.search(r"max relative error (\S+)", out).group(1))
    ok = code == 0 and err < GRAD_TOL and seconds < GRAD_SECONDS
    record(1, ok, f"max rel error {err:.2e} < {GRAD_TOL:g}, {seconds:.1f}s < {GRAD_SECONDS:g}s")
    assert ok


# --- 2 ----------------------------------------------------------------------

def random_attention_params(rng, d_h, d_v, d_att):
    return {"W_a": rng.normal(size=(d_att, d_h)), "U_a": rng.normal(size=(d_att, d_v)),
            "b_a": rng.normal(size=d_att), "w": rng.normal(size=d_att)}


def test_c02_attention_validity():
    rng = np.random.default_rng(2)
    worst_sum, min_alpha, bitwise = 0.0, 1.0, True
    for draw in range(1000):
        n, d_h, d_v = int(rng.integers(1, 31)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        scale = 10.0 ** rng.uniform(-2, 1.5)
        P = {k: v * scale for k, v in random_attention_params(rng, d_h, d_v, 6).items()}
        g = Graph()
        Pn = {k: g.constant(v) for k, v in P.items()}
        V = g.constant(rng.normal(size=(1, n, d_v)))
        alpha = attention_weights(attention_scores(g.constant(rng.normal(size=(1, d_h))), V, Pn))
        worst_sum = max(worst_sum, abs(alpha.value.sum() - 1.0))
        min_alpha = min(min_alpha, alpha.value.min())
        # equal scores give the uniform distribution; its context is the mean context
        uniform = attention_weights(g.constant(np.zeros((1, n))))
        bitwise &= np.array_equal(context_attention(V, uniform).value, context_mean(V).value)
    ok = min_alpha >= 0 and worst_sum <= ALPHA_SUM_TOL and bitwise
    record(2, ok, f"1000 draws: min alpha {min_alpha:.2e} >= 0, max |sum-1| {worst_sum:.1e}"
                  f" <= {ALPHA_SUM_TOL:g}, uniform context == mean context bitwise: {bitwise}")
    assert ok


# --- 3 ----------------------------------------------------------------------

def two_steps(model, V):
    g = Graph()
    P, Vn, state, keys = model.start(g, [V])
    out = model.step(P, Vn, state, [PAD_ID], keys)
    out = model.step(P, Vn, out.state, [3], keys)
    p = dc.softmax_rows(out.logits).value
    alpha = None if out.alpha is None else out.alpha.value[0]
    return p, out.state.h.value, out.state.c.value, alpha


def test_c03_permutation_contract():
    rng = np.random.default_rng(3)
    mean = CaptionModel(DecoderConfig(vocab_size=12, d_v=6, d_emb=5, d_h=8, mode="mean"), seed=1)
    att = CaptionModel(DecoderConfig(vocab_size=12, d_v=6, d_emb=5, d_h=8, d_att=7, d_out=8),
                       seed=2)
    V = rng.normal(size=(11, 6))
    ref_mean, ref_att = two_steps(mean, V), two_steps(att, V)
    invariant = equivariant = 0
    for _ in range(100):
        perm = rng.permutation(11)
        m = two_steps(mean, V[perm])
        invariant += all(np.array_equal(a, b) for a, b in zip(ref_mean[:3], m[:3]))
        a = two_steps(att, V[perm])
        equivariant += (np.array_equal(a[3], ref_att[3][perm])
                        and all(np.array_equal(x, y) for x, y in zip(ref_att[:3], a[:3])))
    ok = invariant == 100 and equivariant == 100
    record(3, ok, f"mean mode bitwise invariant {invariant}/100, attention alpha equivariant"
                  f" with identical p_t {equivariant}/100")
    assert ok


# --- 4 ----------------------------------------------------------------------

def random_model(seed, vocab=8, d_v=4, scale=1.0):
    m = CaptionModel(DecoderConfig(vocab_size=vocab, d_v=d_v, d_emb=5, d_h=6, d_att=4, d_out=6),
                     seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for k in m.params:
        m.params[k] = m.params[k] * scale + rng.normal(scale=0.3, size=m.params[k].shape)
    return m


def exhaustive_best(model, V, vocab, max_len):
    best = None
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=length):
            if EOS_ID in seq[:-1] or (length < max_len and seq[-1] != EOS_ID):
                continue
            s = sequence_logprob(model, V, list(seq))
            if best is None or s > best[0] or (s == best[0] and list(seq) < best[1]):
                best = (s, list(seq))
    return best


def test_c04_decoding_equivalence():
    same = 0
    for seed in range(100):
        m = random_model(seed)
        V = np.random.default_rng(seed).normal(size=(5, 4))
        g = greedy_decode(m, V, max_len=12)
        b, _ = beam_search(m, V, beam_width=1, max_len=12)
        same += b.tokens == g.tokens and b.score == g.score
    exact = 0
    vocab = 6
    for seed in range(10):
        m = random_model(seed, vocab=vocab, scale=2.0)
        V = np.random.default_rng(seed).normal(size=(5, 4))
        best, _ = beam_search(m, V, beam_width=vocab, max_len=2)
        s, seq = exhaustive_best(m, V, vocab, 2)
        exact += best.tokens == seq and best.score == s
    ok = same == 100 and exact == 10
    record(4, ok, f"beam 1 == greedy on {same}/100 models; width |V| == exhaustive on"
                  f" {exact}/10 two-step toys")
    assert ok


# --- 5 ----------------------------------------------------------------------

def test_c05_metric_oracles():
    t = str.split
    checks = []
    checks.append(bleu([t("a man is playing")], [[t("a man is playing")]]) - 1.0)
    # c = 4 > r = 2: no brevity penalty, clipped precision 1/4
    checks.append(bleu([t("a a a a")], [[t("a b")]], max_n=1) - 0.25)
    checks.append(bleu([t("a b")], [[t("a b c d")]], max_n=1) - math.exp(-1.0))
    checks.append(bleu([t("x y z w")], [[t("a b c d")]]))
    checks.append(bleu([t("the cat sat"), t("a dog")],
                       [[t("the cat sat down")], [t("a dog ran"), t("a dog")]], max_n=2)
                  - math.exp(1 - 6 / 5))
    cands, refs = [t("a b c d"), t("p q")], [[t("a b c d")], [t("x y z w")]]
    s = cider_scores(cands, refs)
    checks += [s[0] - 10.0, s[1]]
    checks.append(cider_scores([t("a b c"), t("z")], [[t("a b d")], [t("y")]], max_n=1)[0]
                  - 10.0 * 2 / 3)
    cands3 = [t("a b c"), t("d e"), t("a e f")]
    refs3 = [[t("a b c d")], [t("d e f"), t("d e")], [t("a f e")]]
    checks.append(cider(cands3, refs3) - cider(cands3[::-1], refs3[::-1]))
    metric_err = max(abs(c) for c in checks)

    uniform = CaptionModel(DecoderConfig(vocab_size=100, d_v=3, d_emb=4, d_h=5, mode="mean"))
    for k in uniform.params:
        uniform.params[k] = np.zeros_like(uniform.params[k])
    rng = np.random.default_rng(5)
    exs = [Example(rng.normal(size=(4, 3)), [int(x) for x in rng.integers(2, 100, 5)] + [EOS_ID])
           for _ in range(6)]
    ppl_err = abs(perplexity(uniform, exs) - 100.0)
    m = CaptionModel(DecoderConfig(vocab_size=9, d_v=3, d_emb=4, d_h=5), seed=2)
    ex9 = [Example(rng.normal(size=(4, 3)), [3, 4, 1]) for _ in range(5)]
    cross_err = abs(perplexity(m, ex9) - math.exp(nll_loss(m, ex9) / 3))
    ok = metric_err <= METRIC_TOL and ppl_err <= PPL_UNIFORM_TOL and cross_err <= METRIC_TOL
    record(5, ok, f"BLEU/CIDEr oracle max error {metric_err:.1e} <= {METRIC_TOL:g}; uniform"
                  f" perplexity |ppl-100| {ppl_err:.1e} <= {PPL_UNIFORM_TOL:g}; ppl vs exp(nll)"
                  f" {cross_err:.1e}")
    assert ok


# --- 6 and 7: four variants on the seed-7 synthetic corpus ---------------------

@pytest.fixture(scope="module")
def variants():
    t0 = time.perf_counter()
    corpus = synth_generate(SynthConfig(event_vocab=20, n_slots=26, events_min=2, events_max=4,
                                        n_train=2000, n_valid=200, n_test=200, seed=7))
    vocab = Vocab.build(tokenize(v.caption) for v in corpus.splits["train"])
    net = Conv3DNet(Conv3DConfig(**MOTION_CONV), seed=0)

    def examples(videos, motion):
        return [Example(encode(v.appearance, v.grid, net).vectors if motion else v.appearance,
                        vocab.encode(tokenize(v.caption)), v.id) for v in videos]

    runs = {}
    for motion in (False, True):
        sets = {k: examples(v, motion) for k, v in corpus.splits.items()}
        for mode in ("mean", "attention"):
            ck = train(TrainConfig(mode=mode, **TREND_CONFIG), len(vocab), sets["train"],
                       sets["valid"])
            model = ck.model()
            runs[(mode, motion)] = {"model": model, "test": sets["test"],
                                    "ppl": perplexity(model, sets["test"]),
                                    "best_update": ck.best_update}
    return {"runs": runs, "corpus": corpus, "vocab": vocab,
            "seconds": time.perf_counter() - t0}


NAMES = {("mean", False): "basic", ("mean", True): "+motion",
         ("attention", False): "+attention", ("attention", True): "+motion+attention"}


def test_c06_variant_trend(variants):
    runs, seconds = variants["runs"], variants["seconds"]
    ppl = {k: r["ppl"] for k, r in runs.items()}
    basic = ppl[("mean", False)]
    pairwise = all(ppl[("attention", m)] <= ppl[("mean", m)] for m in (False, True))
    gain = all(ppl[("attention", m)] <= (1 - ATTN_GAIN) * basic for m in (False, True))
    ok = pairwise and gain and seconds < TREND_SECONDS
    table = ", ".join(f"{NAMES[k]} {v:.4f}" for k, v in ppl.items())
    record(6, ok, f"test perplexity {table}; attention <= mean per motion setting: {pairwise};"
                  f" attention <= {1 - ATTN_GAIN:.2f} x basic: {gain};"
                  f" {seconds:.0f}s < {TREND_SECONDS:.0f}s")
    assert ok


def test_c06_report_greedy_and_beam(variants):
    # informational: caption quality under both decoding methods
    vocab, corpus = variants["vocab"], variants["corpus"]
    refs = [[tokenize(v.caption)] for v in corpus.splits["test"]]
    for key, run in variants["runs"].items():
        feats = [ex.features for ex in run["test"]]
        greedy = [vocab.decode(greedy_decode(run["model"], V).tokens) for V in feats]
        beam = [vocab.decode(beam_search(run["model"], V, 5)[0].tokens) for V in feats]
        print(f"{NAMES[key]:18s} greedy BLEU-4 {bleu(greedy, refs):.4f} CIDEr"
              f" {cider(greedy, refs):.3f} | beam-5 BLEU-4 {bleu(beam, refs):.4f} CIDEr"
              f" {cider(beam, refs):.3f}")
        assert all(len(c) > 0 for c in beam)


def alignment_rate(run, videos):
    hits = total = 0
    for video, ex in zip(videos, run["test"]):
        alpha = capture_attention(run["model"], ex.features, ex.ids)
        for pos, slot in enumerate(video.alignment):
            if slot is not None:
                total += 1
                hits += abs(int(np.argmax(alpha[pos])) - slot) <= ALIGN_WINDOW
    return hits / total


def test_c07_attention_alignment(variants):
    videos = variants["corpus"].splits["test"]
    assert variants["corpus"].config.noise == 0.0
    rate = alignment_rate(variants["runs"][("attention", False)], videos)
    rate_motion = alignment_rate(variants["runs"][("attention", True)], videos)
    ok = rate >= ALIGN_MIN
    record(7, ok, f"event-word argmax alpha within +/-{ALIGN_WINDOW} slot: {rate:.3f} >="
                  f" {ALIGN_MIN:.2f} (with motion {rate_motion:.3f})")
    assert ok


# --- 8 ----------------------------------------------------------------------

def test_c08_optimizer_oracles():
    ps = ParamStore()
    ps.add("x", np.array([0.0, 3.0]))
    st = AdadeltaState(0.95, 1e-6)
    g = np.array([1.0, -2.0])
    adadelta_update(ps, {"x": g}, st)
    expected = 3.0 * np.array([0, 1]) - np.sqrt(1e-6) / np.sqrt(0.05 * g ** 2 + 1e-6) * g
    ada_err = np.abs(ps["x"] - expected).max()
    ada_err = max(ada_err, np.abs(st.sq_grad["x"] - 0.05 * g ** 2).max())

    ps = ParamStore()
    ps.add("x", np.array([1.0]))
    vel = {}
    grad = {"x": np.array([2.0])}
    sgd_momentum_update(ps, grad, vel, 0.1, 0.9)
    sgd_momentum_update(ps, grad, vel, 0.1, 0.9)
    # v1 = -0.2, v2 = 0.9 * v1 - 0.2 = -0.38
    mom_err = abs(ps["x"][0] - (1.0 - 0.2 - 0.38))
    ok = ada_err <= OPT_TOL and mom_err <= OPT_TOL
    record(8, ok, f"Adadelta first step error {ada_err:.1e}, momentum two-step error"
                  f" {mom_err:.1e} (<= {OPT_TOL:g})")
    assert ok


# --- 9 ----------------------------------------------------------------------

def test_c09_reproducibility():
    corpus = synth_generate(SynthConfig(n_train=80, n_valid=20, n_test=0, grids=False))
    vocab = Vocab.build(tokenize(v.caption) for v in corpus.splits["train"])
    sets = {k: [Example(v.appearance, vocab.encode(tokenize(v.caption)), v.id) for v in vids]
            for k, vids in corpus.splits.items()}
    cfg = lambda n: TrainConfig(d_emb=8, d_h=16, d_att=8, d_out=16, batch_size=16,
                                valid_every=10, max_updates=n, seed=9)
    args = (len(vocab), sets["train"], sets["valid"])
    a, b = to_bytes(train(cfg(60), *args)), to_bytes(train(cfg(60), *args))
    part = train(cfg(27), *args)
    resumed = to_bytes(train(cfg(60), *args, resume=from_bytes(to_bytes(part))))
    ok = a == b and resumed == a
    record(9, ok, f"same-seed checkpoints identical: {a == b}; resume == uninterrupted:"
                  f" {resumed == a} ({len(a)} bytes)")
    assert ok


# --- 10 ---------------------------------------------------------------------

def test_c10_conv_shapes_and_toy_classifier():
    rng = np.random.default_rng(10)
    cfg = Conv3DConfig(in_channels=4)
    fmap = motion_map(rng.random((15, 15, 120, 4)), Conv3DNet(cfg, seed=0))
    shape_ok = fmap.shape == (1, 1, 15, 352) and cfg.d_motion == 352

    grids, labels = [], []
    for i in range(40):
        y = i % 2
        g = 0.1 * rng.random((8, 8, 8, 2))
        g[:, :, 4 * y:4 * y + 4, y] += 1.0  # class 0 early in time, class 1 late
        grids.append(g)
        labels.append(y)
    net = Conv3DNet(Conv3DConfig(in_channels=2, channels=(4, 4, 4), input_extent=(8, 8, 8),
                                 fc_dim=8, task_classes=(2,), dropout=0.0), seed=0)
    t0 = time.perf_counter()
    train_classifier(net, grids, labels, epochs=15)
    seconds = time.perf_counter() - t0
    acc = classifier_accuracy(net, grids, labels)
    ok = shape_ok and acc > CLS_ACC and seconds < CLS_SECONDS
    record(10, ok, f"15x15x120 grid -> {fmap.shape} (T'=15, 352 channels): {shape_ok};"
                   f" toy training accuracy {acc:.3f} > {CLS_ACC} in {seconds:.1f}s"
                   f" < {CLS_SECONDS:.0f}s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
