"""Train on a small ordered-events corpus, then caption with greedy, beam and sampling.

Run: python3 demos/04_train_and_caption.py   (about a minute)
"""
import numpy as np

from vdc.data import SynthConfig, Vocab, synth_generate, tokenize
from vdc.inference import ascii_attention, beam_search, capture_attention, greedy_decode, sample_decode
from vdc.metrics import perplexity
from vdc.trainer import Example, TrainConfig, train

corpus = synth_generate(SynthConfig(event_vocab=8, n_slots=10, d_app=16, time_features=6,
                                    events_min=1, events_max=3, n_train=300, n_valid=40,
                                    n_test=40, grids=False))
vocab = Vocab.build(tokenize(v.caption) for v in corpus.splits["train"])
sets = {k: [Example(v.appearance, vocab.encode(tokenize(v.caption)), v.id) for v in vids]
        for k, vids in corpus.splits.items()}

for mode in ("mean", "attention"):
    cfg = TrainConfig(d_emb=16, d_h=32, d_att=16, d_out=32, mode=mode, max_updates=1500,
                      valid_every=100, patience_updates=600)
    ck = train(cfg, len(vocab), sets["train"], sets["valid"])
    print(f"{mode:9s} test perplexity {perplexity(ck.model(), sets['test']):.3f}"
          f" (best at update {ck.best_update})")

model = ck.model()
video = corpus.splits["test"][0]
V = video.appearance
print("\nreference:", video.caption, "| event slots", video.slots)
print("greedy   :", " ".join(vocab.decode(greedy_decode(model, V).tokens)))
best, pool = beam_search(model, V, beam_width=5)
print("beam 5   :", " ".join(vocab.decode(best.tokens)), f"(log p {best.score:.3f})")
s = sample_decode(model, V, temperature=1.0, seed=0)
print("sample   :", " ".join(vocab.decode(s.tokens)))

ids = vocab.encode(tokenize(video.caption))
alpha = capture_attention(model, V, ids)
for pos, slot in enumerate(video.alignment):
    if slot is not None:
        print(f"{vocab.itos[ids[pos]]:5s} true slot {slot:2d}  argmax alpha {int(np.argmax(alpha[pos])):2d}")
print("\nattention bars (slots numbered from 1):")
print(ascii_attention(vocab.decode(ids[1:2]), alpha[1:2]))
