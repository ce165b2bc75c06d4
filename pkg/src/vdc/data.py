"""Tokenization, vocabulary, on-disk formats and the synthetic ordered-events corpus."""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractError
from .encoder import FeatureSet

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
PAD_ID, EOS_ID = 0, 1

_WORDPUNCT = re.compile(r"\w+|[^\w\s]+")


def tokenize(text: str) -> list:
    """Split into runs of word characters and runs of other non-space characters."""
    return _WORDPUNCT.findall(text)


class OOVError(KeyError):
    pass


class Vocab:
    """Dense token <-> index map with <pad>=0 and <eos>=1 reserved."""

    def __init__(self, tokens=(), with_unk: bool = False):
        self.itos = [PAD, EOS] + ([UNK] if with_unk else [])
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def build(cls, corpus, with_unk: bool = False) -> "Vocab":
        """Every distinct token in first-occurrence order; frequency is ignored."""
        return cls((t for sent in corpus for t in sent), with_unk=with_unk)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def unk_id(self):
        return self.stoi.get(UNK)

    def index(self, token: str, unk: bool = False) -> int:
        i = self.stoi.get(token)
        if i is None:
            if unk and self.unk_id is not None:
                return self.unk_id
            raise OOVError(token)
        return i

    def encode(self, tokens, unk: bool = False) -> list:
        """Token ids followed by <eos>."""
        return [self.index(t, unk) for t in tokens] + [EOS_ID]

    def count_oov(self, tokens) -> int:
        return sum(t not in self.stoi for t in tokens)

    def decode(self, ids, strip_eos: bool = True) -> list:
        out = [self.itos[i] for i in ids]
        if strip_eos and out and out[-1] == EOS:
            out = out[:-1]
        return out


# ---------------------------------------------------------------------------
# binary formats


class FormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


FEATURE_MAGIC = b"VTFC"
GRID_MAGIC = b"VDGR"
FORMAT_VERSION = 1


def _read_header(buf: bytes, magic: bytes, fmt: str):
    size = struct.calcsize(fmt)
    if len(buf) < 4 or buf[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    if len(buf) < size:
        raise FormatError("truncated header", len(buf))
    fields = struct.unpack_from(fmt, buf)
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {fields[1]}", 4)
    return fields, size


def _read_payload(buf, offset, shape):
    count = int(np.prod(shape))
    need = offset + 4 * count
    if len(buf) < need:
        raise FormatError(f"truncated payload, expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after payload", need)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape).copy()


def write_features(path, fs: FeatureSet) -> None:
    v = np.ascontiguousarray(fs.vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", FEATURE_MAGIC, FORMAT_VERSION, *v.shape))
        f.write(v.tobytes())


def read_features(path) -> FeatureSet:
    buf = Path(path).read_bytes()
    (_, _, n, d), off = _read_header(buf, FEATURE_MAGIC, "<4sIII")
    if n < 1 or d < 1:
        raise FormatError(f"invalid extents n={n}, d_v={d}", 8)
    return FeatureSet(_read_payload(buf, off, (n, d)), Path(path).stem)


def write_grid(path, grid: np.ndarray) -> None:
    g = np.ascontiguousarray(grid, dtype="<f4")
    if g.ndim != 4:
        raise ValueError(f"descriptor grid must be (W, H, T, C), got {g.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sI4I", GRID_MAGIC, FORMAT_VERSION, *g.shape))
        f.write(g.tobytes())


def read_grid(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, off = _read_header(buf, GRID_MAGIC, "<4sI4I")
    return _read_payload(buf, off, fields[2:])


# ---------------------------------------------------------------------------
# manifests


@dataclass
class CaptionedVideo:
    id: str
    features: str
    captions: list
    grid: str | None = None
    alignment: list | None = None  # caption position -> slot, or None

    @property
    def tokens(self) -> list:
        return [tokenize(c) for c in self.captions]

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def write_manifest(path, videos) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in videos:
            f.write(json.dumps(v.to_record(), sort_keys=True) + "\n")


def read_manifest(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(CaptionedVideo(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    event_vocab: int = 20
    events_min: int = 2
    events_max: int = 4
    n_slots: int = 26
    d_app: int = 32
    time_features: int = 8
    noise: float = 0.0
    distractor_prob: float = 0.1
    distractor_scale: float = 0.5
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 7
    lead_word: str = "clip"
    grids: bool = True
    grid_size: tuple = (4, 4)
    cells_per_slot: int = 4
    grid_channels: int = 4

    def validate(self):
        if not 1 <= self.events_min <= self.events_max:
            raise ContractError(f"bad events range [{self.events_min}, {self.events_max}]")
        if self.events_max > self.n_slots:
            raise ContractError(
                f"events per video ({self.events_max}) exceeds slot count ({self.n_slots})")
        if self.events_max > self.event_vocab:
            raise ContractError("events are distinct, so events_max must be <= event_vocab")
        if self.d_app < self.event_vocab + self.time_features:
            raise ContractError(
                f"d_app={self.d_app} cannot hold {self.event_vocab} event dims"
                f" + {self.time_features} time dims")


def event_word(e: int) -> str:
    return f"ev{e}"


@dataclass
class SynthVideo:
    id: str
    appearance: np.ndarray  # (n_slots, d_app)
    caption: str
    events: list
    slots: list
    grid: np.ndarray | None = None

    @property
    def alignment(self) -> list:
        """Caption token position -> ground-truth slot (None for non-event words)."""
        return [None] + list(self.slots) + [None]  # lead word, events, <eos>


@dataclass
class SynthCorpus:
    config: SynthConfig
    splits: dict = field(default_factory=dict)


def time_code(n_slots: int, m: int) -> np.ndarray:
    """Smooth (n_slots, m) code of slot position: Gaussian bumps at evenly spaced centres."""
    if m == 0:
        return np.zeros((n_slots, 0))
    if m == 1:
        return np.linspace(0.0, 1.0, n_slots)[:, None]
    centres = np.linspace(0, n_slots - 1, m)
    width = (n_slots - 1) / (m - 1)
    pos = np.arange(n_slots)[:, None]
    return np.exp(-0.5 * ((pos - centres) / width) ** 2)


def synth_generate(config: SynthConfig) -> SynthCorpus:
    """Videos whose captions list their events in temporal order.

    Random draws do not depend on ``noise``, so regenerating with noise 0
    gives the same events, slots and distractors without the noise.
    """
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    V, n = cfg.event_vocab, cfg.n_slots
    tcode = time_code(n, cfg.time_features)
    profiles = rng.random((V, cfg.grid_channels)) ** 2
    W, H = cfg.grid_size
    T = n * cfg.cells_per_slot

    corpus = SynthCorpus(cfg)
    for split, count in (("train", cfg.n_train), ("valid", cfg.n_valid), ("test", cfg.n_test)):
        videos = []
        for j in range(count):
            k = int(rng.integers(cfg.events_min, cfg.events_max + 1))
            events = [int(e) for e in rng.choice(V, size=k, replace=False)]
            slots = sorted(int(s) for s in rng.choice(n, size=k, replace=False))
            noise = rng.standard_normal((n, cfg.d_app))
            is_distractor = rng.random(n) < cfg.distractor_prob
            distractor_events = rng.integers(0, V, size=n)

            app = np.zeros((n, cfg.d_app))
            app[:, V:V + cfg.time_features] = tcode
            event_slots = set(slots)
            for i in range(n):
                if i not in event_slots and is_distractor[i]:
                    app[i, distractor_events[i]] = cfg.distractor_scale
            for e, s in zip(events, slots):
                app[s, e] = 1.0
            app += cfg.noise * noise

            grid = None
            if cfg.grids:
                base = np.abs(rng.standard_normal((W, H, T, cfg.grid_channels)))
                spatial = 0.5 + 0.5 * rng.random((len(events), W, H, 1, 1))
                grid = cfg.noise * base
                for q, (e, s) in enumerate(zip(events, slots)):
                    t0 = s * cfg.cells_per_slot
                    grid[:, :, t0:t0 + cfg.cells_per_slot, :] += spatial[q] * profiles[e]

            caption = " ".join([cfg.lead_word] + [event_word(e) for e in events])
            videos.append(SynthVideo(f"{split}_{j:05d}", app, caption, events, slots, grid))
        corpus.splits[split] = videos
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir) -> dict:
    """Write manifests plus feature/grid files; returns split -> manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    if corpus.config.grids:
        (out / "grids").mkdir(exist_ok=True)
    paths = {}
    for split, videos in corpus.splits.items():
        records = []
        for v in videos:
            feat = f"features/{v.id}.vtfc"
            write_features(out / feat, FeatureSet(v.appearance, v.id))
            grid = None
            if v.grid is not None:
                grid = f"grids/{v.id}.vdgr"
                write_grid(out / grid, v.grid)
            records.append(CaptionedVideo(v.id, feat, [v.caption], grid, v.alignment))
        paths[split] = out / f"{split}.jsonl"
        write_manifest(paths[split], records)
    return paths
