"""Temporal feature extraction: appearance frames plus a 3-D CNN motion stream."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Graph, Node, ParamStore

DESCRIPTOR_CHANNELS = 99  # HoG + HoF + MbH, 33 bins each
D_APPEARANCE = 1024
D_MOTION = 352
N_SLOTS = 26
MAX_FRAMES = 240


class AlignmentError(ValueError):
    pass


class ModeError(RuntimeError):
    pass


@dataclass
class FeatureSet:
    """The n temporal feature vectors fed to the decoder, stored as an (n, d_v) array."""

    vectors: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DimensionError(f"FeatureSet needs an (n >= 1, d_v) array, got {self.vectors.shape}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_v(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        return (isinstance(other, FeatureSet) and self.source == other.source
                and np.array_equal(self.vectors, other.vectors))


def frame_indices(n_frames: int = N_SLOTS, max_frames: int = MAX_FRAMES) -> np.ndarray:
    """Equally spaced frame positions within the first ``max_frames`` frames."""
    return np.round(np.linspace(0, max_frames - 1, n_frames)).astype(int)


def sample_appearance(frames: np.ndarray, n_frames: int = N_SLOTS,
                      max_frames: int = MAX_FRAMES) -> np.ndarray:
    """Select equally spaced per-frame vectors, zero-padding short videos."""
    frames = np.asarray(frames)
    if frames.shape[0] < max_frames:
        pad = np.zeros((max_frames - frames.shape[0],) + frames.shape[1:], dtype=frames.dtype)
        frames = np.concatenate([frames, pad])
    return frames[frame_indices(n_frames, max_frames)]


@dataclass
class Conv3DConfig:
    in_channels: int = DESCRIPTOR_CHANNELS
    channels: tuple = (32, 64, D_MOTION)
    pools: tuple = ((2, 2, 2), (2, 2, 2), (2, 2, 2))
    # classifier head, activity-recognition mode only
    input_extent: tuple | None = None  # (W, H, T) the head is sized for
    fc_dim: int = 2500
    task_classes: tuple = ()
    dropout: float = 0.5

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.pools = tuple(tuple(p) for p in self.pools)
        self.task_classes = tuple(self.task_classes)
        if len(self.channels) != 3 or len(self.pools) != 3:
            raise ValueError("the conv stack has exactly three stages")

    @property
    def d_motion(self) -> int:
        return self.channels[-1]

    @property
    def has_head(self) -> bool:
        return bool(self.task_classes)

    def output_extent(self, extent) -> tuple:
        ext = tuple(extent)
        for stage, pool in enumerate(self.pools, start=1):
            if any(p > e for p, e in zip(pool, ext)):
                raise DimensionError(
                    f"grid extent {ext} too small for pooling {pool} at stage {stage}")
            ext = tuple((e - p) // p + 1 for e, p in zip(ext, pool))
        return ext


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Conv3DNet:
    """Three conv3d+ReLU+maxpool stages with an optional multitask softmax head."""

    def __init__(self, config: Conv3DConfig, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = self.init_params(config, np.random.default_rng(seed))
        self.params = params

    @staticmethod
    def init_params(config: Conv3DConfig, rng) -> ParamStore:
        p = ParamStore()
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels, start=1):
            p.add(f"K{i}", _glorot(rng, (3, 3, 3, c_in, c_out), 27 * c_in, 27 * c_out))
            p.add(f"b{i}", np.zeros(c_out))
            c_in = c_out
        if config.has_head:
            if config.input_extent is None:
                raise ValueError("a classifier head needs input_extent to size its FC layer")
            ext = config.output_extent(config.input_extent)
            flat = int(np.prod(ext)) * config.d_motion
            p.add("W_fc", _glorot(rng, (config.fc_dim, flat), flat, config.fc_dim))
            p.add("b_fc", np.zeros(config.fc_dim))
            for t, k in enumerate(config.task_classes):
                p.add(f"W_task{t}", _glorot(rng, (k, config.fc_dim), config.fc_dim, k))
                p.add(f"b_task{t}", np.zeros(k))
        return p

    @property
    def conv_names(self) -> list:
        return [f"{k}{i}" for i in (1, 2, 3) for k in ("K", "b")]


def conv_stack_forward(x: Node, net: Conv3DNet, bound: dict) -> Node:
    """Run the three conv+ReLU+pool stages on a (W, H, T, C) grid node."""
    cfg = net.config
    if x.shape[3] != cfg.in_channels:
        raise DimensionError(
            f"grid has {x.shape[3]} channels, network expects {cfg.in_channels}")
    cfg.output_extent(x.shape[:3])  # raises with the failing stage
    for i, pool in enumerate(cfg.pools, start=1):
        x = dc.conv3d(x, bound[f"K{i}"], bound[f"b{i}"])
        x = dc.relu(x)
        x = dc.maxpool3d(x, pool, pool)
    return x


def motion_map(grid: np.ndarray, net: Conv3DNet) -> np.ndarray:
    g = Graph()
    out = conv_stack_forward(g.constant(grid), net, net.params.bind(g, net.conv_names))
    return out.value


def resample_indices(t_in: int, n: int) -> np.ndarray:
    """Nearest-index map from n output slots onto t_in temporal slices."""
    if n == 1:
        return np.zeros(1, dtype=int)
    # floor(x + 0.5) instead of banker's rounding so halves go up
    return np.floor(np.arange(n) * (t_in - 1) / (n - 1) + 0.5).astype(int)


def temporal_vectors(fmap: np.ndarray, n: int) -> np.ndarray:
    """Spatial max-pool of a (W', H', T', d) map, resampled to n temporal slots."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 4 or fmap.shape[2] < 1 or n < 1:
        raise DimensionError(f"temporal_vectors: map {fmap.shape}, n={n}")
    per_slice = fmap.max(axis=(0, 1))  # (T', d)
    return per_slice[resample_indices(per_slice.shape[0], n)]


def encode(appearance: np.ndarray, grid: np.ndarray | None = None,
           net: Conv3DNet | None = None, source: str = "",
           motion: np.ndarray | None = None) -> FeatureSet:
    """Build V from appearance vectors, optionally concatenated with motion vectors.

    Motion vectors come either from ``grid`` run through ``net`` or
    precomputed as an (n, d_motion) array in ``motion``.
    """
    appearance = np.asarray(appearance)
    if appearance.ndim != 2:
        raise DimensionError(f"appearance must be (n, d_app), got {appearance.shape}")
    n = appearance.shape[0]
    if grid is not None:
        if net is None:
            raise ValueError("a descriptor grid was given without a Conv3DNet")
        motion = temporal_vectors(motion_map(grid, net), n)
    if motion is None:
        return FeatureSet(appearance, source)
    motion = np.asarray(motion)
    if motion.ndim != 2 or motion.shape[0] != n:
        raise AlignmentError(f"{motion.shape[0]} motion slots for {n} appearance frames")
    return FeatureSet(np.concatenate([appearance, motion.astype(appearance.dtype)], axis=1),
                      source)


def activity_logits(x: Node, net: Conv3DNet, bound: dict, task_id: int,
                    rng=None, train: bool = False) -> Node:
    cfg = net.config
    if not cfg.has_head:
        raise ModeError("network has no classifier head (caption mode)")
    if not 0 <= task_id < len(cfg.task_classes):
        raise ModeError(f"no softmax head for task {task_id}")
    fmap = conv_stack_forward(x, net, bound)
    # dropout on the inputs of the FC layer and of the softmax layer
    flat = dc.dropout(dc.reshape(fmap, (1, -1)), cfg.dropout, rng, train)
    h = dc.relu(dc.add_bias(dc.linear(flat, bound["W_fc"]), bound["b_fc"]))
    h = dc.dropout(h, cfg.dropout, rng, train)
    return dc.add_bias(dc.linear(h, bound[f"W_task{task_id}"]), bound[f"b_task{task_id}"])


def classify_activity(grid: np.ndarray, net: Conv3DNet, task_id: int = 0) -> np.ndarray:
    g = Graph()
    logits = activity_logits(g.constant(grid), net, net.params.bind(g), task_id)
    return dc.softmax_rows(logits).value[0]


def augment(grid: np.ndarray, rng: np.random.Generator, crop=(15, 15)) -> np.ndarray:
    """Random spatial crop to ``crop`` (W, H) and a horizontal flip with probability 0.5."""
    grid = np.asarray(grid)
    W, H = grid.shape[:2]
    cw, ch = crop
    if cw > W or ch > H:
        raise DimensionError(f"crop {crop} larger than grid {grid.shape[:2]}")
    x0 = rng.integers(0, W - cw + 1)
    y0 = rng.integers(0, H - ch + 1)
    out = grid[x0:x0 + cw, y0:y0 + ch]
    if rng.random() < 0.5:
        out = out[::-1]
    return np.ascontiguousarray(out)


def center_crop(grid: np.ndarray, crop=(15, 15)) -> np.ndarray:
    W, H = grid.shape[:2]
    cw, ch = crop
    if cw > W or ch > H:
        raise DimensionError(f"crop {crop} larger than grid {grid.shape[:2]}")
    x0, y0 = (W - cw) // 2, (H - ch) // 2
    return np.ascontiguousarray(grid[x0:x0 + cw, y0:y0 + ch])
