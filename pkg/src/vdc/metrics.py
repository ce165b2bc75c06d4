"""Corpus BLEU, CIDEr and perplexity."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU with clipped n-gram counts and a brevity penalty.

    ``references[k]`` is the list of reference token lists for
    ``candidates[k]``.  The effective reference length uses the reference
    closest in length to each candidate (shorter one on ties).
    """
    if not candidates:
        raise ContractError("bleu of an empty corpus")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates for {len(references)} reference groups")
    if max_n < 1:
        raise ContractError("max_n must be >= 1")
    clipped = [0] * max_n
    possible = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("every candidate needs at least one reference")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            clipped[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())
            possible[n - 1] += max(len(cand) - n + 1, 0)
    if min(clipped) == 0:
        return 0.0
    log_prec = sum(math.log(c / p) for c, p in zip(clipped, possible)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_prec)


def sentence_bleu(candidate, refs, max_n: int = 4) -> float:
    return bleu([candidate], [refs], max_n)


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in counts.items()}


def _norm(vec: dict) -> float:
    return math.sqrt(sum(v * v for v in vec.values()))


def cider_scores(candidates, references, max_n: int = 4, sigma: float = 6.0,
                 cider_d: bool = False) -> np.ndarray:
    """Per-video CIDEr (x10).

    Document frequencies count the videos whose reference group contains an
    n-gram.  Plain mode averages cosine similarity of TF-IDF vectors; CIDEr-D
    mode clips candidate weights by the reference and applies the Gaussian
    length penalty.
    """
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates for {len(references)} reference groups")
    if len(references) < 2:
        raise ContractError("CIDEr needs at least 2 videos for document frequencies")
    log_n = math.log(len(references))
    dfs = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in references:
            df.update(set().union(*(ngrams(r, n).keys() for r in refs)))
        dfs.append(df)

    out = np.zeros(len(candidates))
    for k, (cand, refs) in enumerate(zip(candidates, references)):
        per_n = []
        for n in range(1, max_n + 1):
            cv = _tfidf(ngrams(cand, n), dfs[n - 1], log_n)
            cn = _norm(cv)
            sims = []
            for r in refs:
                rv = _tfidf(ngrams(r, n), dfs[n - 1], log_n)
                rn = _norm(rv)
                if cider_d:
                    dot = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
                else:
                    dot = sum(v * rv[g] for g, v in cv.items() if g in rv)
                sim = dot / (cn * rn) if cn > 0 and rn > 0 else 0.0
                if cider_d:
                    sim *= math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
                sims.append(sim)
            per_n.append(sum(sims) / len(sims))
        out[k] = 10.0 * sum(per_n) / max_n
    return out


def cider(candidates, references, max_n: int = 4, sigma: float = 6.0,
          cider_d: bool = False) -> float:
    return float(cider_scores(candidates, references, max_n, sigma, cider_d).mean())


def perplexity(model, examples) -> float:
    """exp(total teacher-forced NLL / number of target tokens, <eos> included)."""
    from .trainer import corpus_nll

    if not examples:
        raise ContractError("perplexity of an empty dataset")
    total, tokens = corpus_nll(model, examples)
    return math.exp(total / tokens)


@dataclass
class EvalReport:
    bleu_4: float
    cider: float
    perplexity: float | None
    meteor: None = None  # needs external synonym resources; always null
    oov_mapped: int = 0
    per_video: list = field(default_factory=list)

    def to_text(self) -> str:
        ppl = "null" if self.perplexity is None else f"{self.perplexity:.6f}"
        lines = [f"bleu_4 = {self.bleu_4:.6f}", f"cider = {self.cider:.6f}",
                 f"perplexity = {ppl}", "meteor = null",
                 f"oov_mapped = {self.oov_mapped}", f"videos = {len(self.per_video)}"]
        return "\n".join(lines) + "\n"

    def to_record(self, run_id: str, mode: str) -> str:
        return json.dumps({"run_id": run_id, "mode": mode, "bleu": self.bleu_4,
                           "cider": self.cider, "perplexity": self.perplexity,
                           "meteor": None}, sort_keys=True)


def evaluate(candidates, references, ids=None, model=None, examples=None,
             oov_mapped: int = 0, max_n: int = 4) -> EvalReport:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(candidates))]
    per_cider = cider_scores(candidates, references, max_n)
    per_video = [{"id": vid, "bleu_4": sentence_bleu(c, r, max_n), "cider": float(s)}
                 for vid, c, r, s in zip(ids, candidates, references, per_cider)]
    ppl = perplexity(model, examples) if model is not None else None
    return EvalReport(bleu(candidates, references, max_n), float(per_cider.mean()), ppl,
                      oov_mapped=oov_mapped, per_video=per_video)
