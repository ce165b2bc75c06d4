"""LSTM decoder with mean-pooled or temporally attended context.

All functions work on row batches: hidden states are (B, d_h) nodes and the
feature sets are a (B, n, d_v) node.  A single video is simply B = 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Graph, Node, ParamStore

GATES = ("o", "f", "i", "c")
MODES = ("mean", "attention")


@dataclass
class DecoderConfig:
    vocab_size: int
    d_v: int
    d_emb: int = 32
    d_h: int = 64
    d_att: int = 32
    d_out: int = 64
    mode: str = "attention"
    init_state: str = "zero"  # or "learned"
    tanh_on_memory: bool = False  # h = o * tanh(c) instead of h = o * c
    dropout: bool = False
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init_state not in ("zero", "learned"):
            raise ValueError(f"init_state must be 'zero' or 'learned', got {self.init_state!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class DecoderState:
    h: Node
    c: Node


@dataclass
class StepOutput:
    logits: Node
    state: DecoderState
    alpha: Node | None
    embedding: Node


def _glorot(rng, out_dim, in_dim):
    s = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-s, s, size=(out_dim, in_dim))


def init_params(cfg: DecoderConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform matrices, zero biases."""
    rng = np.random.default_rng(seed)
    V, e, h, v = cfg.vocab_size, cfg.d_emb, cfg.d_h, cfg.d_v
    p = ParamStore()
    p.add("E", _glorot(rng, V, e))
    for g in GATES:
        p.add(f"W_{g}", _glorot(rng, h, e))
        p.add(f"U_{g}", _glorot(rng, h, h))
        p.add(f"A_{g}", _glorot(rng, h, v))
        p.add(f"b_{g}", np.zeros(h))
    p.add("W_p", _glorot(rng, cfg.d_out, h + v + e))
    p.add("U_p", _glorot(rng, V, cfg.d_out))
    p.add("b_p", np.zeros(cfg.d_out))
    p.add("d", np.zeros(V))
    if cfg.mode == "attention":
        p.add("w", _glorot(rng, cfg.d_att, 1)[:, 0])
        p.add("W_a", _glorot(rng, cfg.d_att, h))
        p.add("U_a", _glorot(rng, cfg.d_att, v))
        p.add("b_a", np.zeros(cfg.d_att))
    if cfg.init_state == "learned":
        for s in ("h", "c"):
            p.add(f"W_init_{s}", _glorot(rng, h, v))
            p.add(f"b_init_{s}", np.zeros(h))
    return p


# ---------------------------------------------------------------------------
# context functions


def attention_keys(V: Node, P: dict) -> Node:
    """U_a v_i for every slot, as a (B*n, d_att) node; constant across decode steps."""
    B, n, dv = V.shape
    return dc.linear_rows(dc.reshape(V, (B * n, dv)), P["U_a"])


def attention_scores(h_prev: Node, V: Node, P: dict, keys: Node | None = None) -> Node:
    """Relevance e_i = w . tanh(W_a h_prev + U_a v_i + b_a), shape (B, n)."""
    B, n, dv = V.shape
    if h_prev.shape[1] != P["W_a"].shape[1] or dv != P["U_a"].shape[1]:
        raise DimensionError(
            f"attention_scores: h {h_prev.shape}, V {V.shape}, W_a {P['W_a'].shape},"
            f" U_a {P['U_a'].shape}")
    if keys is None:
        keys = attention_keys(V, P)
    query = dc.add_bias(dc.linear(h_prev, P["W_a"]), P["b_a"])  # once per step
    hidden = dc.tanh(dc.add(keys, dc.repeat_rows(query, n)))
    w = dc.reshape(P["w"], (1, -1))
    return dc.reshape(dc.linear_rows(hidden, w), (B, n))


def attention_weights(e: Node) -> Node:
    return dc.softmax_rows(e)


def context_attention(V: Node, alpha: Node) -> Node:
    if alpha.shape != V.shape[:2]:
        raise DimensionError(f"context_attention: alpha {alpha.shape} for V {V.shape}")
    return dc.weighted_sum(alpha, V)


def context_mean(V: Node) -> Node:
    """Plain average over the n slots (shares the weighted-sum code path)."""
    B, n, _ = V.shape
    if n < 1:
        raise dc.ContractError("context_mean of an empty feature set")
    uniform = V.graph.constant(np.full((B, n), 1.0 / n))
    return dc.weighted_sum(uniform, V)


# ---------------------------------------------------------------------------
# recurrence


def _gate(x, h, phi, P, g):
    pre = dc.add(dc.add(dc.linear(x, P[f"W_{g}"]), dc.linear(h, P[f"U_{g}"])),
                 dc.linear(phi, P[f"A_{g}"]))
    return dc.add_bias(pre, P[f"b_{g}"])


def lstm_step(state: DecoderState, emb: Node, phi: Node, P: dict,
              tanh_on_memory: bool = False) -> DecoderState:
    """One LSTM update from the previous word's embedding and the context phi."""
    o = dc.sigmoid(_gate(emb, state.h, phi, P, "o"))
    f = dc.sigmoid(_gate(emb, state.h, phi, P, "f"))
    i = dc.sigmoid(_gate(emb, state.h, phi, P, "i"))
    c_new = dc.tanh(_gate(emb, state.h, phi, P, "c"))
    c = dc.add(dc.mul(f, state.c), dc.mul(i, c_new))
    h = dc.mul(o, dc.tanh(c) if tanh_on_memory else c)
    return DecoderState(h, c)


def word_logits(h: Node, phi: Node, emb: Node, P: dict, dropout_rate: float = 0.0,
                rng=None, train: bool = False) -> Node:
    """U_p tanh(W_p [h, phi, E[y_prev]] + b_p) + d, before the softmax."""
    hidden = dc.tanh(dc.add_bias(dc.linear(dc.concat([h, phi, emb], axis=1), P["W_p"]),
                                 P["b_p"]))
    hidden = dc.dropout(hidden, dropout_rate, rng, train)
    return dc.add_bias(dc.linear(hidden, P["U_p"]), P["d"])


def word_distribution(h: Node, phi: Node, emb: Node, P: dict) -> Node:
    return dc.softmax_rows(word_logits(h, phi, emb, P))


def init_state(V: Node, P: dict, cfg: DecoderConfig) -> DecoderState:
    B = V.shape[0]
    if cfg.init_state == "zero":
        z = np.zeros((B, cfg.d_h))
        return DecoderState(V.graph.constant(z), V.graph.constant(z))
    mean = context_mean(V)
    h = dc.add_bias(dc.linear(mean, P["W_init_h"]), P["b_init_h"])
    c = dc.add_bias(dc.linear(mean, P["W_init_c"]), P["b_init_c"])
    return DecoderState(h, c)


def decode_step(state: DecoderState, y_prev, V: Node, P: dict, cfg: DecoderConfig,
                keys: Node | None = None, rng=None, train: bool = False) -> StepOutput:
    """Context from h_{t-1}, then the LSTM update, then the word logits.

    One alpha per step, shared by the four gates and the output layer.
    """
    emb = dc.embed_lookup(P["E"], np.atleast_1d(np.asarray(y_prev)))
    alpha = None
    if cfg.mode == "attention":
        alpha = attention_weights(attention_scores(state.h, V, P, keys))
        phi = context_attention(V, alpha)
    else:
        phi = context_mean(V)
    new = lstm_step(state, emb, phi, P, cfg.tanh_on_memory)
    rate = cfg.dropout_rate if cfg.dropout else 0.0
    logits = word_logits(new.h, phi, emb, P, rate, rng, train)
    return StepOutput(logits, new, alpha, emb)


class CaptionModel:
    """Decoder configuration plus its parameters."""

    def __init__(self, config: DecoderConfig, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params

    def features(self, graph: Graph, feature_sets) -> Node:
        """Stack FeatureSets (or (n, d_v) arrays) into a (B, n, d_v) constant."""
        arrs = [getattr(f, "vectors", f) for f in feature_sets]
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1:
            raise DimensionError(f"feature sets in one batch must share shape, got {shapes}")
        (shape,) = shapes
        if shape[1] != self.config.d_v:
            raise DimensionError(f"features have d_v={shape[1]}, model expects {self.config.d_v}")
        return graph.constant(np.stack(arrs))

    def start(self, graph: Graph, feature_sets, P: dict | None = None):
        """Bind parameters (unless ``P`` is given) and build V, the initial state
        and cached attention keys."""
        P = self.params.bind(graph) if P is None else P
        V = self.features(graph, feature_sets)
        keys = attention_keys(V, P) if self.config.mode == "attention" else None
        return P, V, init_state(V, P, self.config), keys

    def step(self, P, V, state, y_prev, keys=None, rng=None, train=False) -> StepOutput:
        return decode_step(state, y_prev, V, P, self.config, keys, rng, train)
