"""The command-line pipeline end to end: synth, train, generate, evaluate, grad-check.

Each call below is equivalent to running `vdc ...` in a shell.

Run: python3 demos/06_cli_pipeline.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from vdc.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="vdc_demo_"))
data, run = work / "data", work / "run"


def vdc(*args):
    print("$ vdc", " ".join(args))
    code = main(list(args))
    print("exit", code, "\n")
    return code


vdc("synth", "--out", str(data), "--set", "n_train=200", "--set", "n_valid=30",
    "--set", "n_test=30")
vdc("train", "--data", str(data), "--out", str(run), "--context", "attention",
    "--max-updates", "400", "--valid-every", "50", "--d-h", "32", "--d-emb", "16")
vdc("generate", "--checkpoint", str(run / "checkpoint.vdcp"), "--data", str(data),
    "--out", str(work / "captions.jsonl"), "--beam", "5",
    "--dump-attention", str(work / "attention"))
vdc("evaluate", "--captions", str(work / "captions.jsonl"), "--data", str(data),
    "--checkpoint", str(run / "checkpoint.vdcp"), "--out", str(work / "eval_report.txt"))
print((work / "eval_report.txt").read_text())
vdc("grad-check", "--max-coords", "20", "--out", str(work))
print("outputs in", work)
