"""Corpus BLEU, CIDEr and perplexity on tiny hand-checkable examples.

Run: python3 demos/05_metrics.py
"""
import math

import numpy as np

from vdc.decoder import CaptionModel, DecoderConfig
from vdc.metrics import bleu, cider_scores, evaluate, perplexity
from vdc.trainer import Example


def toks(s):
    return s.split()


# Clipped unigram precision 1/4; the candidate is longer than the reference, so no penalty.
print("BLEU-1 'a a a a' vs 'a b':", bleu([toks("a a a a")], [[toks("a b")]], max_n=1))
# Half-length candidate: brevity penalty exp(1 - 4/2).
print("BLEU-1 'a b' vs 'a b c d':", bleu([toks("a b")], [[toks("a b c d")]], max_n=1),
      "expected", math.exp(-1))

# CIDEr: an exact match on n-grams unique to one video scores 10.
cands = [toks("a b c d"), toks("p q")]
refs = [[toks("a b c d")], [toks("x y z w")]]
print("CIDEr per video:", cider_scores(cands, refs))

# A model with all-zero parameters predicts uniformly: perplexity equals the vocabulary size.
m = CaptionModel(DecoderConfig(vocab_size=50, d_v=3, d_emb=4, d_h=5, mode="mean"))
for k in m.params:
    m.params[k] = np.zeros_like(m.params[k])
exs = [Example(np.ones((4, 3)), [5, 6, 7, 1])]
print("uniform-model perplexity:", perplexity(m, exs))

print()
print(evaluate(cands, refs, ["v1", "v2"]).to_text())
