"""Maximum-likelihood training of the caption decoder and SGD for the 3-D CNN head."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .data import EOS_ID, PAD_ID
from .decoder import CaptionModel, DecoderConfig
from .diffcore import ContractError, Graph, NumericError, ParamStore
from .encoder import Conv3DNet, activity_logits, augment, center_crop

log = logging.getLogger(__name__)


@dataclass
class Example:
    """One (video, description) pair: features (n, d_v) and token ids ending in <eos>."""

    features: np.ndarray
    ids: list
    video_id: str = ""


@dataclass
class TrainConfig:
    d_emb: int = 32
    d_h: int = 64
    d_att: int = 32
    d_out: int = 64
    dropout: bool = False
    batch_size: int = 32
    patience_updates: int = 5000
    max_updates: int = 20000
    valid_every: int = 100
    seed: int = 0
    mode: str = "attention"
    motion: bool = False
    init_state: str = "zero"
    tanh_on_memory: bool = False
    rho: float = 0.95
    eps: float = 1e-6

    def decoder_config(self, vocab_size: int, d_v: int) -> DecoderConfig:
        return DecoderConfig(vocab_size=vocab_size, d_v=d_v, d_emb=self.d_emb, d_h=self.d_h,
                             d_att=self.d_att, d_out=self.d_out, mode=self.mode,
                             init_state=self.init_state, tanh_on_memory=self.tanh_on_memory,
                             dropout=self.dropout)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def batch_loss(graph: Graph, model: CaptionModel, batch, rng=None, train: bool = False,
               P: dict | None = None):
    """Teacher-forced NLL summed over each sequence and averaged over the batch.

    Returns (loss node, number of target tokens).  Sequences shorter than the
    longest one are padded with <pad> targets that carry zero weight.
    """
    if not batch:
        raise ContractError("empty batch")
    vocab_size = model.config.vocab_size
    for ex in batch:
        if not ex.ids or ex.ids[-1] != EOS_ID:
            raise ContractError(f"sequence for {ex.video_id!r} does not end with <eos>")
        if min(ex.ids) < 0 or max(ex.ids) >= vocab_size:
            raise IndexError(f"token id outside vocabulary of size {vocab_size}")
    B = len(batch)
    T = max(len(ex.ids) for ex in batch)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, ex in enumerate(batch):
        targets[b, :len(ex.ids)] = ex.ids
        mask[b, :len(ex.ids)] = 1.0
    inputs = np.concatenate([np.full((B, 1), PAD_ID), targets[:, :-1]], axis=1)

    P, V, state, keys = model.start(graph, [ex.features for ex in batch], P)
    total = None
    for t in range(T):
        out = model.step(P, V, state, inputs[:, t], keys, rng, train)
        state = out.state
        ce = dc.cross_entropy(out.logits, targets[:, t], mask[:, t])
        total = ce if total is None else dc.add(total, ce)
    return dc.scale(total, 1.0 / B), int(mask.sum())


def nll_loss(model: CaptionModel, batch) -> float:
    """Negative mean (over pairs) of the summed log-likelihood of each description."""
    loss, _ = batch_loss(Graph(), model, batch)
    return float(loss.value)


def length_batches(examples, batch_size: int, order=None) -> list:
    """Group example indices by sequence length, then chunk each group."""
    order = range(len(examples)) if order is None else order
    groups: dict = {}
    for i in order:
        groups.setdefault(len(examples[i].ids), []).append(int(i))
    out = []
    for length in sorted(groups):
        idx = groups[length]
        out.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    return out


def corpus_nll(model: CaptionModel, examples, batch_size: int = 256):
    """Total teacher-forced NLL and token count over a dataset."""
    total, tokens = 0.0, 0
    for idx in length_batches(examples, batch_size):
        batch = [examples[i] for i in idx]
        loss, n_tok = batch_loss(Graph(), model, batch)
        total += float(loss.value) * len(batch)
        tokens += n_tok
    return total, tokens


def mean_token_logprob(model: CaptionModel, examples) -> float:
    total, tokens = corpus_nll(model, examples)
    return -total / tokens


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict = field(default_factory=dict)    # E[g^2]
    sq_update: dict = field(default_factory=dict)  # E[dx^2]


def adadelta_update(params: ParamStore, grads: dict, state: AdadeltaState) -> None:
    """In-place Adadelta step over the parameters named in ``grads``."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise dc.DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        eg = state.sq_grad.setdefault(name, np.zeros_like(p))
        ex = state.sq_update.setdefault(name, np.zeros_like(p))
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -(np.sqrt(ex + eps) / np.sqrt(eg + eps)) * g
        ex *= rho
        ex += (1 - rho) * delta * delta
        p += delta


def sgd_momentum_update(params: ParamStore, grads: dict, velocity: dict, lr: float,
                        momentum: float) -> None:
    """v <- momentum * v - lr * g; theta <- theta + v (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        v = velocity.setdefault(name, np.zeros_like(params[name]))
        v *= momentum
        v -= lr * g
        params[name] += v


class LRSchedule:
    """Steps through fixed learning-rate phases whenever validation cost stagnates.

    Stagnation means no improvement larger than ``min_delta`` over
    ``patience`` consecutive checks.  ``observe`` returns True once the last
    phase has stagnated too.
    """

    def __init__(self, phases=(0.1, 0.05, 0.02, 0.01), patience: int = 5,
                 min_delta: float = 1e-4):
        self.phases = tuple(phases)
        self.patience = patience
        self.min_delta = min_delta
        self.phase = 0
        self.best = math.inf
        self.bad_checks = 0

    @property
    def lr(self) -> float:
        return self.phases[self.phase]

    def observe(self, cost: float) -> bool:
        if cost < self.best - self.min_delta:
            self.best = cost
            self.bad_checks = 0
            return False
        self.bad_checks += 1
        if self.bad_checks < self.patience:
            return False
        if self.phase + 1 >= len(self.phases):
            return True
        self.phase += 1
        self.bad_checks = 0
        return False


# ---------------------------------------------------------------------------
# caption training loop


class DivergenceError(NumericError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    decoder: DecoderConfig
    vocab: list
    params: ParamStore
    best_params: ParamStore
    optimizer: AdadeltaState
    rng_state: dict
    update: int = 0
    best_valid: float = -math.inf
    best_update: int = 0
    stopped: bool = False
    epoch: int = 0
    plan: list = field(default_factory=list)
    cursor: int = 0
    history: list = field(default_factory=list)
    running: float = 0.0  # train NLL accumulated since the last validation check
    running_tokens: int = 0
    extra: dict = field(default_factory=dict)  # e.g. frozen conv-net parameters

    def model(self, best: bool = True) -> CaptionModel:
        return CaptionModel(self.decoder, self.best_params if best else self.params)


def _check_dims(examples, d_v, what):
    for ex in examples:
        if ex.features.ndim != 2 or ex.features.shape[1] != d_v:
            raise dc.DimensionError(
                f"{what} example {ex.video_id!r} has features {ex.features.shape}, expected d_v={d_v}")


def train(config: TrainConfig, vocab_size: int, train_set, valid_set,
          resume: Checkpoint | None = None, vocab: list | None = None,
          extra: dict | None = None, on_check=None) -> Checkpoint:
    """Adadelta on minibatches with patience-based early stopping.

    Validation (mean per-token log-probability) runs every
    ``config.valid_every`` updates; the best-scoring parameters are kept.
    Training stops after ``patience_updates`` updates without improvement
    or at ``max_updates``.  ``resume`` continues a previous run exactly.
    """
    if not train_set or not valid_set:
        raise ContractError("train and valid sets must be nonempty")
    d_v = train_set[0].features.shape[1]
    _check_dims(train_set, d_v, "train")
    _check_dims(valid_set, d_v, "valid")

    if resume is None:
        dcfg = config.decoder_config(vocab_size, d_v)
        params = CaptionModel(dcfg, seed=config.seed).params
        rng = np.random.default_rng(config.seed)
        ck = Checkpoint(config, dcfg, list(vocab or []), params, params.copy(),
                        AdadeltaState(config.rho, config.eps), rng.bit_generator.state,
                        extra=dict(extra or {}))
    else:
        ck = resume
        ck.config = replace(ck.config, max_updates=config.max_updates,
                            patience_updates=config.patience_updates)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        if ck.decoder.d_v != d_v:
            raise dc.DimensionError(f"checkpoint expects d_v={ck.decoder.d_v}, data has {d_v}")
    cfg = ck.config
    model = CaptionModel(ck.decoder, ck.params)

    while ck.update < cfg.max_updates and not ck.stopped:
        if ck.cursor >= len(ck.plan):
            order = rng.permutation(len(train_set))
            plan = length_batches(train_set, cfg.batch_size, order)
            ck.plan = [plan[i] for i in rng.permutation(len(plan))]
            ck.cursor = 0
            ck.epoch += 1
        batch = [train_set[i] for i in ck.plan[ck.cursor]]
        ck.cursor += 1

        g = Graph()
        loss, n_tok = batch_loss(g, model, batch, rng=rng, train=True)
        if not np.isfinite(loss.value):
            raise DivergenceError(f"loss became {float(loss.value)} at update {ck.update}")
        dc.backward(loss)
        adadelta_update(ck.params, g.param_grads(), ck.optimizer)
        ck.update += 1
        ck.running += float(loss.value) * len(batch)
        ck.running_tokens += n_tok

        if ck.update % cfg.valid_every == 0:
            valid = mean_token_logprob(model, valid_set)
            train_nll = ck.running / max(ck.running_tokens, 1)
            ck.running, ck.running_tokens = 0.0, 0
            ck.history.append((ck.update, train_nll, -valid))
            log.info("update %d train_nll %.4f valid_nll %.4f", ck.update, train_nll, -valid)
            if valid > ck.best_valid:
                ck.best_valid = valid
                ck.best_update = ck.update
                ck.best_params = ck.params.copy()
            elif ck.update - ck.best_update >= cfg.patience_updates:
                ck.stopped = True
            if on_check is not None:
                on_check(ck)
    ck.rng_state = rng.bit_generator.state
    return ck


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass
class SearchSpace:
    d_emb: tuple = (100, 1000)
    d_h: tuple = (100, 3000)
    dropout_prob: float = 0.5


def _log_uniform_int(rng, lo, hi):
    if lo == hi:
        return int(lo)
    return int(np.clip(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))), lo, hi))


def random_search(space: SearchSpace, n_trials: int, seed: int,
                  base: TrainConfig | None = None) -> list:
    """Sample shared hyperparameter setups; reuse the list across model variants."""
    if n_trials < 1:
        raise ContractError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    base = base or TrainConfig()
    out = []
    for _ in range(n_trials):
        d_emb = _log_uniform_int(rng, *space.d_emb)
        d_h = _log_uniform_int(rng, *space.d_h)
        dropout = bool(rng.random() < space.dropout_prob)
        out.append(replace(base, d_emb=d_emb, d_h=d_h, dropout=dropout))
    return out


# ---------------------------------------------------------------------------
# 3-D CNN activity classifier


def classifier_loss(graph: Graph, net: Conv3DNet, grids, labels, task_id: int = 0,
                    rng=None, train: bool = False):
    bound = net.params.bind(graph)
    total = None
    for grid, y in zip(grids, labels):
        logits = activity_logits(graph.constant(grid), net, bound, task_id, rng, train)
        ce = dc.cross_entropy(logits, [y])
        total = ce if total is None else dc.add(total, ce)
    return dc.scale(total, 1.0 / len(labels))


def classifier_accuracy(net: Conv3DNet, grids, labels, task_id: int = 0) -> float:
    hits = 0
    for grid, y in zip(grids, labels):
        g = Graph()
        logits = activity_logits(g.constant(grid), net, net.params.bind(g), task_id)
        hits += int(np.argmax(logits.value[0]) == y)
    return hits / len(labels)


def train_classifier(net: Conv3DNet, grids, labels, valid_grids=None, valid_labels=None,
                     task_id: int = 0, batch_size: int = 8, epochs: int = 20,
                     momentum: float = 0.7, schedule: LRSchedule | None = None,
                     crop=None, seed: int = 0) -> list:
    """Minibatch SGD with momentum; the learning rate follows ``schedule``.

    Validation cost (training cost when no valid set is given) is checked
    once per epoch.  Returns the per-epoch validation costs.
    """
    rng = np.random.default_rng(seed)
    schedule = schedule or LRSchedule()
    velocity: dict = {}
    valid_grids = grids if valid_grids is None else valid_grids
    valid_labels = labels if valid_labels is None else valid_labels
    costs = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            batch = [grids[i] for i in idx]
            if crop is not None:
                batch = [augment(b, rng, crop) for b in batch]
            g = Graph()
            loss = classifier_loss(g, net, batch, [labels[i] for i in idx], task_id, rng, True)
            dc.backward(loss)
            sgd_momentum_update(net.params, g.param_grads(), velocity, schedule.lr, momentum)
        vg = valid_grids if crop is None else [center_crop(b, crop) for b in valid_grids]
        cost = float(classifier_loss(Graph(), net, vg, valid_labels, task_id).value)
        costs.append(cost)
        if schedule.observe(cost):
            break
    return costs
