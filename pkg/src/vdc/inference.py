"""Caption generation: greedy, sampling and beam search, plus attention capture."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import EOS_ID, PAD_ID
from .decoder import CaptionModel, DecoderState, init_state
from .diffcore import Graph, log_softmax_np
from .encoder import FeatureSet, ModeError


@dataclass
class Hypothesis:
    tokens: list
    score: float  # sum of log p over tokens
    h: np.ndarray = None
    c: np.ndarray = None
    alphas: list = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS_ID


class Stepper:
    """Runs single decode steps for one video on plain arrays.

    A batch of k rows stands for k hypotheses over the same video.
    """

    def __init__(self, model: CaptionModel, features):
        self.model = model
        self.V = np.asarray(getattr(features, "vectors", features))

    def initial(self, k: int = 1):
        g = Graph()
        V = g.constant(np.broadcast_to(self.V, (k,) + self.V.shape))
        s = init_state(V, self.model.params.bind(g), self.model.config)
        return s.h.value, s.c.value

    def __call__(self, h, c, y_prev):
        k = h.shape[0]
        if k > 1:
            # row by row, so a hypothesis scores the same whatever its beam-mates
            rows = [self(h[j:j + 1], c[j:j + 1], [y_prev[j]]) for j in range(k)]
            alphas = None if rows[0][3] is None else np.concatenate([r[3] for r in rows])
            return (np.concatenate([r[0] for r in rows]), np.concatenate([r[1] for r in rows]),
                    np.concatenate([r[2] for r in rows]), alphas)
        g = Graph()
        P = self.model.params.bind(g)
        V = g.constant(np.broadcast_to(self.V, (k,) + self.V.shape))
        state = DecoderState(g.constant(h), g.constant(c))
        out = self.model.step(P, V, state, np.asarray(y_prev, dtype=np.int64))
        alpha = None if out.alpha is None else out.alpha.value
        return log_softmax_np(out.logits.value), out.state.h.value, out.state.c.value, alpha


def _prev_token(tokens):
    return tokens[-1] if tokens else PAD_ID


def greedy_decode(model: CaptionModel, features, max_len: int = 30) -> Hypothesis:
    """Argmax at every step (lowest index on ties) until <eos> or ``max_len``."""
    step = Stepper(model, features)
    h, c = step.initial()
    hyp = Hypothesis([], 0.0, h, c)
    while len(hyp.tokens) < max_len and not hyp.finished:
        logp, h, c, alpha = step(hyp.h, hyp.c, [_prev_token(hyp.tokens)])
        tok = int(np.argmax(logp[0]))
        hyp.tokens.append(tok)
        hyp.score += float(logp[0, tok])
        hyp.h, hyp.c = h, c
        if alpha is not None:
            hyp.alphas.append(alpha[0])
    return hyp


def sample_decode(model: CaptionModel, features, max_len: int = 30,
                  temperature: float = 1.0, seed: int = 0) -> Hypothesis:
    """Draw each word from p_t^(1/temperature), renormalised."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    rng = np.random.default_rng(seed)
    step = Stepper(model, features)
    h, c = step.initial()
    hyp = Hypothesis([], 0.0, h, c)
    while len(hyp.tokens) < max_len and not hyp.finished:
        logp, h, c, alpha = step(hyp.h, hyp.c, [_prev_token(hyp.tokens)])
        z = logp[0] / temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        tok = int(rng.choice(len(p), p=p))
        hyp.tokens.append(tok)
        hyp.score += float(logp[0, tok])
        hyp.h, hyp.c = h, c
        if alpha is not None:
            hyp.alphas.append(alpha[0])
    return hyp


def beam_search(model: CaptionModel, features, beam_width: int = 5, max_len: int = 30,
                length_penalty: float = 0.0):
    """Width-k search on accumulated log-probability.

    Hypotheses that emit <eos> are frozen and compete at final selection.
    Search ends early once a finished hypothesis outscores every live one.
    Returns (best hypothesis, the finished hypotheses plus any still live at
    ``max_len``, sorted best first).  ``length_penalty`` > 0 divides final scores by
    len**length_penalty; the default 0 ranks by raw log-probability.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    step = Stepper(model, features)
    h, c = step.initial()
    live = [Hypothesis([], 0.0, h, c)]
    finished = []
    for _ in range(max_len):
        H = np.concatenate([hp.h for hp in live])
        C = np.concatenate([hp.c for hp in live])
        logp, H, C, alpha = step(H, C, [_prev_token(hp.tokens) for hp in live])
        total = np.array([hp.score for hp in live])[:, None] + logp
        flat = total.ravel()
        k = min(beam_width, flat.size)
        cut = np.partition(flat, flat.size - k)[flat.size - k]
        cand = np.flatnonzero(flat >= cut)
        V = logp.shape[1]
        ranked = sorted(cand, key=lambda q: (-flat[q], live[q // V].tokens + [q % V]))[:k]
        new_live = []
        for q in ranked:
            j, v = divmod(int(q), V)
            parent = live[j]
            hyp = Hypothesis(parent.tokens + [v], parent.score + float(logp[j, v]),
                             H[j:j + 1], C[j:j + 1],
                             parent.alphas + ([] if alpha is None else [alpha[j]]))
            (finished if v == EOS_ID else new_live).append(hyp)
        live = new_live
        if not live:
            break
        # scores only decrease as hypotheses grow, so nothing live can win
        if length_penalty == 0 and finished and \
                max(f.score for f in finished) >= max(l.score for l in live):
            live = []
            break

    def final(hp):
        if length_penalty:
            return hp.score / len(hp.tokens) ** length_penalty
        return hp.score

    pool = sorted(finished + live, key=lambda hp: (-final(hp), hp.tokens))
    return pool[0], pool


def sequence_logprob(model: CaptionModel, features, tokens) -> float:
    """Sum of log p(y_t | y_<t, V) along a forced token sequence."""
    step = Stepper(model, features)
    h, c = step.initial()
    total, prev = 0.0, PAD_ID
    for tok in tokens:
        logp, h, c, _ = step(h, c, [prev])
        total += float(logp[0, tok])
        prev = tok
    return total


def capture_attention(model: CaptionModel, features, tokens) -> np.ndarray:
    """(T, n) matrix; row t holds the weights used when emitting ``tokens[t]``."""
    if model.config.mode != "attention":
        raise ModeError("attention weights exist only for attention-mode models")
    step = Stepper(model, features)
    h, c = step.initial()
    rows, prev = [], PAD_ID
    for tok in tokens:
        _, h, c, alpha = step(h, c, [prev])
        rows.append(alpha[0])
        prev = tok
    return np.array(rows).reshape(len(rows), step.V.shape[0])


def write_attention_csv(path, words, alpha: np.ndarray) -> None:
    alpha = np.asarray(alpha)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["token"] + [f"slot_{i + 1}" for i in range(alpha.shape[1])])
        for word, row in zip(words, alpha):
            w.writerow([word] + [f"{a:.6f}" for a in row])


def read_attention_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    words = [r[0] for r in rows[1:]]
    return words, np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def ascii_attention(words, alpha: np.ndarray) -> str:
    """One line per (word, slot) with one '#' per 0.05 of weight; empty bars omitted."""
    lines = []
    for word, row in zip(words, np.asarray(alpha)):
        lines.append(f"{word}:")
        for i, a in enumerate(row):
            bar = "#" * int(a / 0.05 + 1e-9)
            if bar:
                lines.append(f"  slot {i + 1:3d} {bar}")
    return "\n".join(lines)


def as_features(x) -> FeatureSet:
    return x if isinstance(x, FeatureSet) else FeatureSet(np.asarray(x))
