"""Diversity and fidelity metrics over generated continuations.

All functions take texts as sequences of hashable tokens (ids or
strings). The seven reported quantities: perplexity (computed by the
model code, merely carried here), unigram KL divergence against the
reference, MS-Jaccard n-gram overlap, Self-BLEU, Distinct-n, tail
repetition rate, and the count of unique generated types — plus the
share of generated tokens falling into frequency buckets cut from the
training mass.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from . import REPORT_FORMAT_VERSION, DataError
from .partition import sort_by_frequency

import numpy as np


def ngrams(seq, n: int):
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


@dataclass
class NGramProfile:
    """Raw n-gram counts over a text collection."""

    n: int
    counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_texts(cls, texts, n: int) -> "NGramProfile":
        c = Counter()
        for t in texts:
            c.update(ngrams(t, n))
        return cls(n, c)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def frequencies(self) -> dict:
        total = self.total
        return {g: c / total for g, c in self.counts.items()}


def kl_divergence(gen: NGramProfile, ref: NGramProfile) -> float:
    """KL(gen ‖ ref) over n-gram distributions.

    The reference is add-one smoothed over the union support, but only
    when the generated text contains an n-gram the reference lacks —
    otherwise both distributions are used as-is, so identical profiles
    give exactly 0.
    """
    if gen.total == 0 or ref.total == 0:
        raise ValueError("profiles must be non-empty")
    union = set(gen.counts) | set(ref.counts)
    needs_smoothing = any(g not in ref.counts for g in gen.counts)
    if needs_smoothing:
        denom = ref.total + len(union)
        ref_prob = {g: (ref.counts.get(g, 0) + 1) / denom for g in gen.counts}
    else:
        ref_prob = {g: ref.counts[g] / ref.total for g in gen.counts}
    gen_total = gen.total
    kl = 0.0
    for g, c in gen.counts.items():
        p = c / gen_total
        kl += p * math.log(p / ref_prob[g])
    return kl


def ms_jaccard(gen_texts, ref_texts, n: int) -> float:
    """Sum of min over sum of max of the normalized n-gram frequencies."""
    gen = NGramProfile.from_texts(gen_texts, n)
    ref = NGramProfile.from_texts(ref_texts, n)
    if gen.total == 0 or ref.total == 0:
        raise ValueError(f"a collection has no {n}-grams (texts shorter than n)")
    fg, fr = gen.frequencies(), ref.frequencies()
    num = den = 0.0
    for g in set(fg) | set(fr):
        a, b = fg.get(g, 0.0), fr.get(g, 0.0)
        num += min(a, b)
        den += max(a, b)
    return num / den


def ms_jaccard_aggregate(gen_texts, ref_texts, ns=(1, 2, 3)) -> float:
    """Geometric mean of the per-n scores (optional summary figure)."""
    vals = [ms_jaccard(gen_texts, ref_texts, n) for n in ns]
    if any(v == 0.0 for v in vals):
        return 0.0
    return math.exp(sum(math.log(v) for v in vals) / len(vals))


def _bleu_from_counters(i: int, counters, lengths, n: int, smooth: bool) -> float:
    """Cumulative BLEU-n of text i against all others, from precomputed
    per-order n-gram Counters.

    Zero-precision convention: without smoothing any zero modified
    precision makes the score 0; with smoothing each precision gets
    add-one on numerator and denominator.
    """
    c = lengths[i]
    if c == 0:
        return 0.0
    log_sum = 0.0
    for j in range(1, n + 1):
        cand = counters[j - 1][i]
        total = sum(cand.values())
        if total == 0:
            return 0.0
        clipped = 0
        for g, cnt in cand.items():
            best = 0
            for r, rc in enumerate(counters[j - 1]):
                if r != i and rc.get(g, 0) > best:
                    best = rc[g]
            clipped += min(cnt, best)
        if smooth:
            p = (clipped + 1) / (total + 1)
        elif clipped == 0:
            return 0.0
        else:
            p = clipped / total
        log_sum += math.log(p) / n
    # brevity penalty against the closest reference length (ties -> shorter)
    r = min((abs(lengths[r_] - c), lengths[r_]) for r_ in range(len(lengths)) if r_ != i)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def self_bleu(texts, n: int, smooth: bool = False) -> float:
    """Mean BLEU-n of each text against all the others as references;
    lower means the collection is more internally diverse."""
    if len(texts) < 2:
        raise ValueError("self_bleu needs at least 2 texts")
    texts = [list(t) for t in texts]
    lengths = [len(t) for t in texts]
    counters = [[Counter(ngrams(t, j)) for t in texts] for j in range(1, n + 1)]
    scores = [_bleu_from_counters(i, counters, lengths, n, smooth) for i in range(len(texts))]
    return sum(scores) / len(scores)


def distinct_n(texts, n: int) -> float:
    """Mean over texts of unique / total n-grams; texts shorter than n
    contribute no value."""
    vals = []
    for t in texts:
        g = ngrams(t, n)
        if g:
            vals.append(len(set(g)) / len(g))
    if not vals:
        raise ValueError(f"no text has any {n}-grams")
    return sum(vals) / len(vals)


def _tail_repeats(seq, max_phrase: int, min_repeats: int) -> bool:
    for p in range(1, max_phrase + 1):
        need = p * min_repeats
        if need > len(seq):
            break
        tail = seq[-need:]
        if all(tail[i] == tail[i % p] for i in range(p, need)):
            return True
    return False


def repetition(texts, max_phrase: int = 10, min_repeats: int = 3) -> float:
    """Fraction of texts ending in a phrase of length <= max_phrase
    repeated at least min_repeats times consecutively."""
    if not texts:
        raise ValueError("empty collection")
    hits = sum(1 for t in texts if _tail_repeats(list(t), max_phrase, min_repeats))
    return hits / len(texts)


def uniq(texts) -> int:
    """Number of distinct token types across the whole collection."""
    types = set()
    for t in texts:
        types.update(t)
    return len(types)


# ---------------------------------------------------------------------------
# Frequency buckets
# ---------------------------------------------------------------------------

BUCKET_NAMES = ("frequent", "medium", "rare", "very_rare")
DEFAULT_BUCKET_CUTS = (0.4, 0.75, 0.9)


def token_buckets(freq, cuts=DEFAULT_BUCKET_CUTS) -> np.ndarray:
    """Bucket index (0..3) per token id, by cumulative training mass.

    A token lands in the first bucket whose mass cut its preceding
    cumulative mass has not yet reached, so a token straddling a cut
    stays in the earlier bucket. Zero-count tokens are very_rare.
    """
    counts = np.asarray(getattr(freq, "counts", freq), dtype=np.float64).ravel()
    masses = counts / counts.sum()
    order = sort_by_frequency(counts)
    sorted_masses = masses[order]
    cum_before = np.cumsum(sorted_masses) - sorted_masses
    bucket_by_rank = np.searchsorted(np.asarray(cuts), cum_before, side="right")
    buckets = np.empty(counts.shape[0], dtype=np.int64)
    buckets[order] = bucket_by_rank
    buckets[counts == 0] = len(cuts)
    return buckets


def bucket_shares(gen_texts, freq, cuts=DEFAULT_BUCKET_CUTS) -> dict:
    """Share of generated tokens per frequency bucket; ids outside the
    table count as very_rare."""
    buckets = token_buckets(freq, cuts)
    v = buckets.shape[0]
    tally = np.zeros(len(cuts) + 1, dtype=np.int64)
    total = 0
    for t in gen_texts:
        for tok in t:
            tid = int(tok)
            tally[buckets[tid] if 0 <= tid < v else len(cuts)] += 1
            total += 1
    if total == 0:
        raise DataError("no generated tokens to bucket")
    return {name: float(tally[i] / total) for i, name in enumerate(BUCKET_NAMES)}


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


def _fixed(x: float | None):
    # fixed-precision real serialization keeps report files byte-stable
    return None if x is None else float(f"{x:.12g}")


@dataclass
class EvalReport:
    ppl: float | None
    kld: float
    msj: dict
    self_bleu: dict
    distinct: dict
    rep: float
    uniq: int
    bucket_shares: dict | None = None

    def to_dict(self) -> dict:
        return {
            "ppl": _fixed(self.ppl),
            "kld": _fixed(self.kld),
            "msj": {str(n): _fixed(v) for n, v in self.msj.items()},
            "self_bleu": {str(n): _fixed(v) for n, v in self.self_bleu.items()},
            "distinct": {str(n): _fixed(v) for n, v in self.distinct.items()},
            "rep": _fixed(self.rep),
            "uniq": self.uniq,
            "bucket_shares": None if self.bucket_shares is None else
                {k: _fixed(v) for k, v in self.bucket_shares.items()},
        }


def evaluate_generations(gen_texts, ref_texts, freq=None, ppl: float | None = None,
                         ns=(1, 2, 3), kld_direction: str = "gen_ref",
                         bleu_smooth: bool = False,
                         bucket_cuts=DEFAULT_BUCKET_CUTS) -> EvalReport:
    """Assemble the full report for one collection of continuations."""
    if not gen_texts or not ref_texts:
        raise DataError("need at least one generated and one reference text")
    g1 = NGramProfile.from_texts(gen_texts, 1)
    r1 = NGramProfile.from_texts(ref_texts, 1)
    if kld_direction == "gen_ref":
        kld = kl_divergence(g1, r1)
    elif kld_direction == "ref_gen":
        kld = kl_divergence(r1, g1)
    else:
        raise ValueError(f"unknown kld direction {kld_direction!r}")
    return EvalReport(
        ppl=ppl,
        kld=kld,
        msj={n: ms_jaccard(gen_texts, ref_texts, n) for n in ns},
        self_bleu={n: self_bleu(gen_texts, n, smooth=bleu_smooth) for n in ns},
        distinct={n: distinct_n(gen_texts, n) for n in ns},
        rep=repetition(gen_texts),
        uniq=uniq(gen_texts),
        bucket_shares=None if freq is None else bucket_shares(gen_texts, freq, bucket_cuts),
    )


def write_report(path: str | Path, rows: dict, meta: dict | None = None) -> None:
    """rows: name -> EvalReport. JSON on disk, sorted keys, stable reals."""
    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "meta": meta or {},
        "rows": {name: rep.to_dict() for name, rep in rows.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def report_tsv(rows: dict) -> str:
    """Flat table, one row per model, dash for missing values."""
    cols = ["name", "ppl", "kld", "msj1", "msj2", "msj3", "sb1", "sb2", "sb3",
            "d1", "d2", "d3", "rep", "uniq"]
    out = ["\t".join(cols)]
    for name, r in rows.items():
        d = r.to_dict()

        def cell(v):
            return "-" if v is None else (str(v) if isinstance(v, int) else f"{v:.4f}")

        out.append("\t".join([
            name, cell(d["ppl"]), cell(d["kld"]),
            cell(d["msj"]["1"]), cell(d["msj"]["2"]), cell(d["msj"]["3"]),
            cell(d["self_bleu"]["1"]), cell(d["self_bleu"]["2"]), cell(d["self_bleu"]["3"]),
            cell(d["distinct"]["1"]), cell(d["distinct"]["2"]), cell(d["distinct"]["3"]),
            cell(d["rep"]), cell(d["uniq"]),
        ]))
    return "\n".join(out) + "\n"
