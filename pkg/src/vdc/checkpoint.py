"""Binary checkpoint file.

Layout (little-endian)::

    b"VDCP"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 count, then `count` parameter blobs
    u32 count, then `count` optimizer-state blobs
    u32 rng_len  RNG state (UTF-8 JSON)

    blob := u32 name_len  name  u32 rank  rank * u32 extents  float64 data
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import FormatError
from .decoder import DecoderConfig
from .diffcore import ParamStore, dtype
from .trainer import AdadeltaState, Checkpoint, TrainConfig

MAGIC = b"VDCP"
VERSION = 1


def _write_blob(f, name: str, arr: np.ndarray) -> None:
    b = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", len(b)) + b)
    f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    f.write(arr.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint, wanted {n} bytes", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data.copy()


def _split_extra(extra: dict):
    meta, arrays = {}, {}
    for key, val in extra.items():
        if isinstance(val, ParamStore):
            arrays[key] = val
        else:
            meta[key] = val
    return meta, arrays


def to_bytes(ck: Checkpoint) -> bytes:
    meta, extra_arrays = _split_extra(ck.extra)
    header = {
        "train_config": asdict(ck.config),
        "decoder_config": asdict(ck.decoder),
        "vocab": ck.vocab,
        "update": ck.update,
        "best_valid": ck.best_valid,
        "best_update": ck.best_update,
        "stopped": ck.stopped,
        "epoch": ck.epoch,
        "plan": ck.plan,
        "cursor": ck.cursor,
        "history": ck.history,
        "running": ck.running,
        "running_tokens": ck.running_tokens,
        "adadelta": {"rho": ck.optimizer.rho, "eps": ck.optimizer.eps},
        "extra": meta,
        "extra_params": sorted(extra_arrays),
    }
    f = io.BytesIO()
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(MAGIC + struct.pack("<II", VERSION, len(h)) + h)

    blobs = [(f"param/{k}", v) for k, v in ck.params.items()]
    blobs += [(f"best/{k}", v) for k, v in ck.best_params.items()]
    for key in sorted(extra_arrays):
        blobs += [(f"extra/{key}/{k}", v) for k, v in extra_arrays[key].items()]
    f.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(f, name, arr)

    opt = [(f"sq_grad/{k}", v) for k, v in ck.optimizer.sq_grad.items()]
    opt += [(f"sq_update/{k}", v) for k, v in ck.optimizer.sq_update.items()]
    f.write(struct.pack("<I", len(opt)))
    for name, arr in opt:
        _write_blob(f, name, arr)

    r = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(r)) + r)
    return f.getvalue()


def from_bytes(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise FormatError("bad magic, expected b'VDCP'", 0)
    version = rd.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    header = json.loads(rd.take(rd.u32()).decode("utf-8"))
    dt = dtype()

    params, best = ParamStore(), ParamStore()
    extra = {k: ParamStore() for k in header["extra_params"]}
    for _ in range(rd.u32()):
        name, arr = rd.blob()
        kind, rest = name.split("/", 1)
        if kind == "param":
            params.add(rest, arr.astype(dt))
        elif kind == "best":
            best.add(rest, arr.astype(dt))
        elif kind == "extra":
            key, pname = rest.split("/", 1)
            extra[key].add(pname, arr.astype(dt))
        else:
            raise FormatError(f"unknown blob kind {kind!r}", rd.pos)
    adad = header["adadelta"]
    opt = AdadeltaState(adad["rho"], adad["eps"])
    for _ in range(rd.u32()):
        name, arr = rd.blob()
        kind, pname = name.split("/", 1)
        getattr(opt, kind)[pname] = arr.astype(dt)
    rng_state = json.loads(rd.take(rd.u32()).decode("utf-8"))
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", rd.pos)

    extra.update(header["extra"])
    return Checkpoint(
        config=TrainConfig(**header["train_config"]),
        decoder=DecoderConfig(**header["decoder_config"]),
        vocab=header["vocab"], params=params, best_params=best, optimizer=opt,
        rng_state=rng_state, update=header["update"], best_valid=header["best_valid"],
        best_update=header["best_update"], stopped=header["stopped"], epoch=header["epoch"],
        plan=header["plan"], cursor=header["cursor"],
        history=[tuple(h) for h in header["history"]], running=header["running"],
        running_tokens=header["running_tokens"], extra=extra)


def save_checkpoint(path, ck: Checkpoint) -> bytes:
    data = to_bytes(ck)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
