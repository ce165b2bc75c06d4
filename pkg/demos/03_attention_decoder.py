"""Soft temporal attention against plain averaging, one decode step at a time.

Run: python3 demos/03_attention_decoder.py
"""
import numpy as np

from vdc.data import PAD_ID
from vdc.decoder import CaptionModel, DecoderConfig
from vdc.diffcore import Graph


def first_step(model, V):
    g = Graph()
    P, Vn, state, keys = model.start(g, [V])
    out = model.step(P, Vn, state, [PAD_ID], keys)
    alpha = None if out.alpha is None else out.alpha.value[0]
    return out.logits.value[0], alpha


rng = np.random.default_rng(0)
V = rng.normal(size=(6, 5))
perm = rng.permutation(6)

att = CaptionModel(DecoderConfig(vocab_size=10, d_v=5, d_emb=4, d_h=8, d_att=6, d_out=8), seed=1)
logits, alpha = first_step(att, V)
print("alpha", np.round(alpha, 4), "sum", alpha.sum())

# Shuffling the slots shuffles alpha the same way and leaves the word logits unchanged.
logits_p, alpha_p = first_step(att, V[perm])
print("alpha follows the permutation:", np.array_equal(alpha_p, alpha[perm]))
print("same logits:", np.array_equal(logits_p, logits))

# Mean mode is blind to slot order by construction.
mean = CaptionModel(DecoderConfig(vocab_size=10, d_v=5, d_emb=4, d_h=8, mode="mean"), seed=1)
a, _ = first_step(mean, V)
b, _ = first_step(mean, V[perm])
print("mean mode order invariant:", np.array_equal(a, b))

