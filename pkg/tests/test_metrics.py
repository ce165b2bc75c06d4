import math

import numpy as np
import pytest

from vdc.decoder import CaptionModel, DecoderConfig
from vdc.diffcore import ContractError
from vdc.metrics import EvalReport, bleu, cider, cider_scores, evaluate, perplexity
from vdc.trainer import Example, nll_loss


def toks(s):
    return s.split()


def test_bleu_identical():
    c = toks("a man is playing a guitar")
    assert bleu([c], [[c]]) == 1.0


def test_bleu_clipping_without_brevity_penalty():
    # c = 4 > r = 2, so no brevity penalty; only the clipped precision 1/4 remains
    assert abs(bleu([toks("a a a a")], [[toks("a b")]], max_n=1) - 0.25) < 1e-9


def test_bleu_brevity_penalty():
    assert abs(bleu([toks("a b")], [[toks("a b c d")]], max_n=1) - math.exp(-1.0)) < 1e-9


def test_bleu_no_overlap():
    assert bleu([toks("x y z w")], [[toks("a b c d")]]) == 0.0


def test_bleu_hand_bigram_corpus():
    cands = [toks("the cat sat"), toks("a dog")]
    refs = [[toks("the cat sat down")], [toks("a dog ran"), toks("a dog")]]
    # unigrams 5/5, bigrams 3/3; c = 5, r = 4 + 2 (closest reference lengths)
    expected = math.exp(1 - 6 / 5)
    assert abs(bleu(cands, refs, max_n=2) - expected) < 1e-9


def test_bleu_closest_reference_tie_prefers_shorter():
    # c = 3, references of length 2 and 4 are equally close -> r = 2, no penalty
    assert abs(bleu([toks("a b c")], [[toks("a b"), toks("a b c d")]], max_n=1) - 1.0) < 1e-9


def test_bleu_reference_set_containing_candidate():
    c = toks("one two three four five")
    assert bleu([c], [[toks("other words here"), c]]) == 1.0


def test_bleu_errors():
    with pytest.raises(ContractError):
        bleu([], [])
    with pytest.raises(ContractError):
        bleu([toks("a")], [])


def test_bleu_invariant_under_relabeling():
    cands = [toks("a b c d e"), toks("b c a")]
    refs = [[toks("a b c d f")], [toks("b c a a"), toks("c a")]]
    relabel = {w: w.upper() + "_" for w in "abcdef"}
    rc = [[relabel[w] for w in c] for c in cands]
    rr = [[[relabel[w] for w in r] for r in g] for g in refs]
    assert bleu(cands, refs, 2) == bleu(rc, rr, 2)


def test_cider_identical_rare_ngrams_score_ten():
    cands = [toks("a b c d"), toks("p q")]
    refs = [[toks("a b c d")], [toks("x y z w")]]
    scores = cider_scores(cands, refs)
    assert abs(scores[0] - 10.0) < 1e-9
    assert scores[1] == 0.0


def test_cider_hand_unigram():
    # video 1: cand "a b", ref "a c"; video 2 ref "a d".  N = 2.
    # idf(a) = 0, idf(b) = idf(c) = idf(d) = ln 2 with b absent from every reference.
    cands = [toks("a b"), toks("a d")]
    refs = [[toks("a c")], [toks("a d")]]
    s = cider_scores(cands, refs, max_n=1)
    assert s[0] == 0.0
    assert abs(s[1] - 10.0) < 1e-9


def test_cider_partial_overlap_hand_value():
    cands = [toks("a b c"), toks("z")]
    refs = [[toks("a b d")], [toks("y")]]
    # every unigram has df 1 -> equal idf ln 2; cosine of {a,b,c} and {a,b,d} = 2/3
    s = cider_scores(cands, refs, max_n=1)
    assert abs(s[0] - 10.0 * 2 / 3) < 1e-9


def test_cider_order_invariant():
    cands = [toks("a b c"), toks("d e"), toks("a e f")]
    refs = [[toks("a b c d")], [toks("d e f"), toks("d e")], [toks("a f e")]]
    s = cider_scores(cands, refs)
    perm = [2, 0, 1]
    sp = cider_scores([cands[i] for i in perm], [refs[i] for i in perm])
    assert np.allclose(s[perm], sp, atol=1e-12, rtol=0)
    assert abs(cider(cands, refs) - cider([cands[i] for i in perm], [refs[i] for i in perm])) < 1e-12


def test_cider_needs_two_videos():
    with pytest.raises(ContractError):
        cider([toks("a")], [[toks("a")]])


def test_cider_d_length_penalty():
    cands = [toks("a b c d"), toks("p q")]
    refs = [[toks("a b c d e f")], [toks("x y z w")]]
    plain = cider_scores(cands, refs, max_n=1)[0]
    d = cider_scores(cands, refs, max_n=1, cider_d=True)[0]
    assert d < plain


def uniform_model(vocab):
    m = CaptionModel(DecoderConfig(vocab_size=vocab, d_v=3, d_emb=4, d_h=5, mode="mean"))
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


def test_perplexity_uniform():
    rng = np.random.default_rng(0)
    exs = [Example(rng.normal(size=(4, 3)), [int(t) for t in rng.integers(2, 100, 5)] + [1])
           for _ in range(6)]
    assert abs(perplexity(uniform_model(100), exs) - 100.0) < 1e-6


def test_perplexity_perfect_model():
    m = uniform_model(5)
    m.params["d"][1] = 1e4
    assert perplexity(m, [Example(np.ones((4, 3)), [1])]) == 1.0


def test_perplexity_matches_nll():
    m = CaptionModel(DecoderConfig(vocab_size=9, d_v=3, d_emb=4, d_h=5), seed=2)
    rng = np.random.default_rng(3)
    exs = [Example(rng.normal(size=(4, 3)), [3, 4, 1]) for _ in range(5)]
    per_token = nll_loss(m, exs) / 3
    assert abs(perplexity(m, exs) - math.exp(per_token)) < 1e-9
    with pytest.raises(ContractError):
        perplexity(m, [])


def test_evaluate_report_and_record():
    cands = [toks("a b c"), toks("d e")]
    refs = [[toks("a b c")], [toks("d f")]]
    rep = evaluate(cands, refs, ["v1", "v2"])
    assert isinstance(rep, EvalReport) and rep.perplexity is None and rep.meteor is None
    assert 0 <= rep.bleu_4 <= 1 and rep.cider >= 0
    text = rep.to_text()
    assert "bleu_4 = " in text and "meteor = null" in text
    rec = rep.to_record("run1", "attention")
    assert '"mode": "attention"' in rec and "\n" not in rec
    assert [v["id"] for v in rep.per_video] == ["v1", "v2"]
