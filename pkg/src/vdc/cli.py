"""Command-line entry point: ``vdc {synth,train,generate,evaluate,grad-check}``.

Config files are flat ``key = value`` text with ``#`` comments.  Values given
on the command line override values from the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Vocab, read_features, read_grid, read_manifest, synth_generate,
                   tokenize, write_corpus, SynthConfig, FormatError)
from .decoder import CaptionModel, DecoderConfig
from .encoder import Conv3DConfig, Conv3DNet, encode
from .inference import (ascii_attention, beam_search, capture_attention, greedy_decode,
                        sample_decode, write_attention_csv)
from .metrics import evaluate
from .trainer import Example, TrainConfig, batch_loss, train

log = logging.getLogger("vdc")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_MODE, EXIT_IDS = 0, 1, 2, 3, 4, 5


class CLIError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# config handling


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(EXIT_CONFIG, f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise CLIError(EXIT_CONFIG, f"cannot read config {path}: {exc}")


def _coerce(key: str, text, default):
    if not isinstance(text, str):
        return text
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(x) for x in p.split("x")) for p in parts)
            return tuple(int(p) for p in parts)
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"bad value for {key}: {text!r}")
    return text


def build_dataclass(cls, values: dict, prefix: str = ""):
    """Instantiate ``cls`` from string values; unknown keys are config errors."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else key
        if name not in names:
            raise CLIError(EXIT_CONFIG, f"unknown config key: {key}")
        kwargs[name] = _coerce(key, val, getattr(defaults, name))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CLIError(EXIT_CONFIG, str(exc))


def _split_keys(values: dict, prefix: str):
    mine = {k: v for k, v in values.items() if k.startswith(prefix)}
    rest = {k: v for k, v in values.items() if not k.startswith(prefix)}
    return mine, rest


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _args_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def write_manifest_json(out_dir, command, config, seed, inputs, outputs, started,
                        checkpoint=None):
    manifest = {
        "command": command, "config": config, "seed": seed,
        "inputs": [str(p) for p in inputs], "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": round(time.time() - started, 3),
        "precision": dc.get_precision(),
    }
    if checkpoint is not None:
        manifest["checkpoint_sha256"] = sha256_file(checkpoint)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# dataset loading


def load_split(data_dir, split):
    path = Path(data_dir) / f"{split}.jsonl"
    try:
        return read_manifest(path)
    except (OSError, ValueError, TypeError) as exc:
        raise CLIError(EXIT_DATA, f"cannot read manifest {path}: {exc}")


def video_features(data_dir, video, net: Conv3DNet | None):
    root = Path(data_dir)
    try:
        fs = read_features(root / video.features)
        if net is None:
            return fs.vectors.astype(dc.dtype())
        if video.grid is None:
            raise CLIError(EXIT_DATA, f"video {video.id} has no descriptor grid for --motion on")
        grid = read_grid(root / video.grid).astype(dc.dtype())
        return encode(fs.vectors.astype(dc.dtype()), grid, net, video.id).vectors
    except (OSError, FormatError, dc.DimensionError) as exc:
        raise CLIError(EXIT_DATA, f"video {video.id}: {exc}")


def build_examples(data_dir, videos, vocab: Vocab, net, unk=False):
    out, oov = [], 0
    for v in videos:
        feats = video_features(data_dir, v, net)
        for toks in v.tokens:
            oov += vocab.count_oov(toks)
            out.append(Example(feats, vocab.encode(toks, unk=unk), v.id))
    return out, oov


def conv_net_from_checkpoint(ck):
    if "conv_config" not in ck.extra:
        return None
    return Conv3DNet(Conv3DConfig(**ck.extra["conv_config"]), ck.extra["conv_params"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.time()
    values = read_config(args.config)
    values.update(dict(kv.split("=", 1) for kv in args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = build_dataclass(SynthConfig, values)
    try:
        corpus = synth_generate(cfg)
    except dc.ContractError as exc:
        raise CLIError(EXIT_CONFIG, str(exc))
    out = Path(args.out)
    paths = write_corpus(corpus, out)
    (out / "synth.cfg").write_text(
        "".join(f"{k} = {_fmt(v)}\n" for k, v in dataclasses.asdict(cfg).items()))
    # conv settings matching the generated grid geometry, for `train --motion on`
    W, H = cfg.grid_size
    (out / "train.cfg").write_text(
        f"conv_channels = 8,8,16\n"
        f"conv_pools = {'2x2x2' if W >= 4 else '1x1x2'},{'2x2x2' if W >= 8 else '1x1x2'},"
        f"{'2x2x2' if W >= 8 else '1x1x2'}\n")
    write_manifest_json(out, "synth", dataclasses.asdict(cfg), cfg.seed, [args.config or "-"],
                        list(paths.values()), started)
    print(f"wrote {sum(len(v) for v in corpus.splits.values())} videos to {out}")
    return EXIT_OK


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


TRAIN_FLAGS = {"context": "mode", "patience": "patience_updates", "max_updates": "max_updates",
               "seed": "seed", "batch_size": "batch_size", "valid_every": "valid_every",
               "d_emb": "d_emb", "d_h": "d_h"}


def cmd_train(args) -> int:
    started = time.time()
    values = read_config(args.config)
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag)
        if val is not None:
            values[key] = str(val)
    if args.motion is not None:
        values["motion"] = args.motion
    conv_values, values = _split_keys(values, "conv_")
    cfg = build_dataclass(TrainConfig, values)

    net = None
    train_videos = load_split(args.data, "train")
    valid_videos = load_split(args.data, "valid")
    if not train_videos or not valid_videos:
        raise CLIError(EXIT_DATA, "train and valid splits must be nonempty")
    if cfg.motion:
        first = train_videos[0]
        if first.grid is None:
            raise CLIError(EXIT_DATA, "--motion on needs descriptor grids in the manifest")
        try:
            channels = read_grid(Path(args.data) / first.grid).shape[3]
        except (OSError, FormatError) as exc:
            raise CLIError(EXIT_DATA, str(exc))
        ccfg = build_dataclass(Conv3DConfig, {"in_channels": str(channels), **conv_values},
                               prefix="conv_")
        net = Conv3DNet(ccfg, seed=cfg.seed)
    elif conv_values:
        log.info("ignoring conv_* keys: motion features are off")

    corpus = [t for v in train_videos for t in v.tokens]
    if args.resume:
        resume = load_checkpoint(args.resume)
        vocab = Vocab()
        vocab.itos = list(resume.vocab)
        vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
        net = conv_net_from_checkpoint(resume)
    else:
        resume = None
        vocab = Vocab.build(corpus, with_unk=True)
    train_set, _ = build_examples(args.data, train_videos, vocab, net)
    valid_set, _ = build_examples(args.data, valid_videos, vocab, net, unk=True)

    extra = {}
    if net is not None:
        conf = dataclasses.asdict(net.config)
        extra = {"conv_config": conf, "conv_params": net.params}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ck = train(cfg, len(vocab), train_set, valid_set, resume=resume,
                   vocab=list(vocab.itos), extra=extra)
    except dc.DimensionError as exc:
        raise CLIError(EXIT_DATA, str(exc))
    ckpt = out / "checkpoint.vdcp"
    save_checkpoint(ckpt, ck)
    with open(out / "train_log.txt", "w") as f:
        f.write("# update train_nll valid_nll\n")
        for u, tr, va in ck.history:
            f.write(f"{u} {tr:.6f} {va:.6f}\n")
    write_manifest_json(out, "train", {**dataclasses.asdict(cfg), "conv": extra.get("conv_config")},
                        cfg.seed, [args.data, args.config or "-", args.resume or "-"],
                        [ckpt, out / "train_log.txt"], started, checkpoint=ckpt)
    print(f"trained {ck.update} updates, best valid log-prob/token {ck.best_valid:.4f}"
          f" at update {ck.best_update}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, FormatError, KeyError, ValueError) as exc:
        raise CLIError(EXIT_DATA, f"cannot load checkpoint {path}: {exc}")


def cmd_generate(args) -> int:
    started = time.time()
    ck = _load_ckpt(args.checkpoint)
    model = ck.model()
    if args.dump_attention and model.config.mode != "attention":
        raise CLIError(EXIT_MODE, "--dump-attention needs an attention-mode checkpoint")
    net = conv_net_from_checkpoint(ck)
    itos = ck.vocab
    videos = load_split(args.data, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    att_dir = Path(args.dump_attention) if args.dump_attention else None
    if att_dir:
        att_dir.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for v in videos:
            feats = video_features(args.data, v, net)
            if args.greedy:
                hyp = greedy_decode(model, feats, args.max_len)
            elif args.sample:
                hyp = sample_decode(model, feats, args.max_len, args.temperature, args.seed)
            else:
                hyp, _ = beam_search(model, feats, args.beam, args.max_len)
            words = [itos[t] for t in hyp.tokens]
            shown = words[:-1] if words and words[-1] == "<eos>" else words
            f.write(json.dumps({"id": v.id, "tokens": shown, "caption": " ".join(shown),
                                "score": hyp.score}) + "\n")
            if att_dir:
                alpha = capture_attention(model, feats, hyp.tokens)
                write_attention_csv(att_dir / f"{v.id}.csv", words, alpha)
                if args.ascii:
                    print(f"== {v.id}\n{ascii_attention(words, alpha)}")
    write_manifest_json(out.parent, "generate", _args_config(args), args.seed,
                        [args.checkpoint, args.data], [out], started, checkpoint=args.checkpoint)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    videos = {v.id: v for v in load_split(args.data, args.split)}
    cands = {}
    with open(args.captions) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                cands[rec["id"]] = rec["tokens"] if "tokens" in rec else tokenize(rec["caption"])
    missing = sorted(set(videos) - set(cands))
    extra = sorted(set(cands) - set(videos))
    if missing or extra:
        raise CLIError(EXIT_IDS, f"caption ids do not match dataset; missing: {missing}"
                                 f" unexpected: {extra}")
    ids = sorted(videos)
    refs = [videos[i].tokens for i in ids]
    model = examples = None
    oov = 0
    mode = "none"
    if args.checkpoint:
        ck = _load_ckpt(args.checkpoint)
        model = ck.model()
        mode = model.config.mode
        vocab = Vocab()
        vocab.itos = list(ck.vocab)
        vocab.stoi = {t: i for i, t in enumerate(vocab.itos)}
        examples, oov = build_examples(args.data, [videos[i] for i in ids], vocab,
                                       conv_net_from_checkpoint(ck), unk=True)
    report = evaluate([cands[i] for i in ids], refs, ids, model, examples, oov)
    text = report.to_text()
    print(text, end="")
    run_id = hashlib.sha256((Path(args.captions).read_bytes()
                             + (Path(args.checkpoint).read_bytes() if args.checkpoint else b"")
                             )).hexdigest()[:12]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + report.to_record(run_id, mode) + "\n")
    write_manifest_json(out.parent, "evaluate", _args_config(args), None,
                        [args.captions, args.data] + ([args.checkpoint] if args.checkpoint else []),
                        [out], started, checkpoint=args.checkpoint)
    return EXIT_OK


def gradcheck_model(d_emb=8, d_h=10, d_v=12, n=5, vocab=20, length=4, mode="attention",
                    seed=0, init_state="zero"):
    """Toy model, features and caption for a full-decoder gradient check.

    Parameter magnitudes are drawn away from zero: a near-zero entry (say of
    ``w``) makes whole gradient rows vanish, and central differences at
    eps 1e-5 cannot resolve gradients much below 1e-8.
    """
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(vocab_size=vocab, d_v=d_v, d_emb=d_emb, d_h=d_h, d_att=d_h,
                        d_out=d_h, mode=mode, init_state=init_state)
    model = CaptionModel(cfg, seed=seed)
    for k, a in model.params.items():
        s = np.abs(a).max() if a.ndim > 1 else 0.5
        model.params[k] = rng.choice([-1.0, 1.0], a.shape) * rng.uniform(0.5, 1.0, a.shape) * s
    feats = rng.normal(size=(n, d_v))
    ids = [int(t) for t in rng.integers(2, vocab, size=length - 1)] + [1]
    return model, Example(feats, ids, "gradcheck")


def cmd_gradcheck(args) -> int:
    started = time.time()
    with dc.precision(64):
        model, ex = gradcheck_model(args.d_emb, args.d_h, args.d_v, args.n, args.vocab,
                                    args.length, args.mode, args.seed)

        def builder(g, bound):
            return batch_loss(g, model, [ex], P=bound)[0]

        res = dc.grad_check(builder, model.params, eps=args.eps, max_coords=args.max_coords,
                            seed=args.seed)
    lines = [f"{name:10s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}"
             for name, err in res.per_param.items()]
    print("\n".join(lines))
    if args.out:
        report = Path(args.out) / "grad_check.txt"
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text("\n".join(lines) + f"\nmax {res.max_rel_error:.6e}\n")
        write_manifest_json(args.out, "grad-check", _args_config(args), args.seed, [],
                            [report], started)
    if res.passed(args.tol):
        print(f"PASS max relative error {res.max_rel_error:.3e} < {args.tol}")
        return EXIT_OK
    print(f"FAIL worst parameter {res.worst} relative error {res.max_rel_error:.3e}")
    return EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdc", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic ordered-events corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a caption model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--context", choices=["mean", "attention"])
    t.add_argument("--motion", choices=["on", "off"])
    t.add_argument("--patience", type=int)
    t.add_argument("--max-updates", dest="max_updates", type=int)
    t.add_argument("--valid-every", dest="valid_every", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--d-emb", dest="d_emb", type=int)
    t.add_argument("--d-h", dest="d_h", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="caption every video of a split")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--split", default="test")
    g.add_argument("--out", required=True)
    mode = g.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--sample", action="store_true")
    g.add_argument("--beam", type=int, default=5)
    g.add_argument("--max-len", dest="max_len", type=int, default=30)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dump-attention", dest="dump_attention")
    g.add_argument("--ascii", action="store_true", help="print attention bars")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="BLEU, CIDEr and perplexity")
    e.add_argument("--captions", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--out", default="eval_report.txt",
                   help="report file; the run manifest goes next to it")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("grad-check", help="finite-difference check of the full model")
    c.add_argument("--d-emb", dest="d_emb", type=int, default=8)
    c.add_argument("--d-h", dest="d_h", type=int, default=10)
    c.add_argument("--d-v", dest="d_v", type=int, default=12)
    c.add_argument("--n", type=int, default=5)
    c.add_argument("--vocab", type=int, default=20)
    c.add_argument("--length", type=int, default=4)
    c.add_argument("--mode", choices=["mean", "attention"], default="attention")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-coords", dest="max_coords", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".", help="directory for the report and run manifest")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return args.func(args)
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
