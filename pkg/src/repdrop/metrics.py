"""Repetition metrics (rep-n, rep-w, rep-r) and perplexity reports."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence


def _ids(seq) -> List[int]:
    # accept TokenSeq-like objects as well as plain sequences
    return list(getattr(seq, "ids", seq))


def ngram_list(seq, n: int) -> List[tuple]:
    ids = _ids(seq)
    return [tuple(ids[i:i + n]) for i in range(len(ids) - n + 1)]


def rep_n(seq, n: int = 2) -> float:
    """Fraction of n-grams in ``seq`` that duplicate an earlier n-gram.

    Computed as ``1 - |unique n-grams| / (L - n + 1)``.
    """
    ids = _ids(seq)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(ids) < n:
        raise ValueError("sequence shorter than n")
    grams = ngram_list(ids, n)
    return 1.0 - len(set(grams)) / len(grams)


def rep_w(seq, w: int = 16) -> float:
    """Fraction of tokens that already occurred in the previous ``w`` tokens.

    The window for position t is the previous ``min(w, t - 1)`` tokens.
    """
    ids = _ids(seq)
    if w < 1:
        raise ValueError("w must be >= 1")
    if not ids:
        raise ValueError("empty sequence")
    last_seen: Dict[int, int] = {}
    hits = 0
    for t, tok in enumerate(ids):
        prev = last_seen.get(tok)
        if prev is not None and t - prev <= w:
            hits += 1
        last_seen[tok] = t
    return hits / len(ids)


def rep_r(seq) -> float:
    """Fraction of positions that take part in a bigram occurring twice or more.

    A position i counts if the bigram starting at i or the bigram ending at i
    occurs elsewhere in the sequence. Boundary positions only check the
    bigram that exists.
    """
    ids = _ids(seq)
    if len(ids) < 2:
        raise ValueError("sequence shorter than 2")
    counts: Dict[tuple, int] = defaultdict(int)
    for g in ngram_list(ids, 2):
        counts[g] += 1
    hits = 0
    L = len(ids)
    for i in range(L):
        fwd = i + 1 < L and counts[(ids[i], ids[i + 1])] > 1
        bwd = i > 0 and counts[(ids[i - 1], ids[i])] > 1
        hits += fwd or bwd
    return hits / L


def _corpus_mean(fn, seqs: Iterable, min_len: int):
    values, skipped = [], 0
    for s in seqs:
        if len(_ids(s)) < min_len:
            skipped += 1
            continue
        values.append(fn(s))
    if not values:
        raise ValueError(f"no sequence with length >= {min_len}")
    return math.fsum(values) / len(values), skipped


def corpus_rep_n(seqs: Iterable, n: int = 2, return_skipped: bool = False):
    """Unweighted mean of per-sequence rep-n; sequences shorter than n are skipped."""
    mean, skipped = _corpus_mean(lambda s: rep_n(s, n), seqs, n)
    return (mean, skipped) if return_skipped else mean


def corpus_rep_w(seqs: Iterable, w: int = 16) -> float:
    return _corpus_mean(lambda s: rep_w(s, w), seqs, 1)[0]


def corpus_rep_r(seqs: Iterable) -> float:
    return _corpus_mean(rep_r, seqs, 2)[0]


@dataclass
class MetricConfig:
    ns: Sequence[int] = (2, 3, 4)
    w: int = 16

    def __post_init__(self):
        if any(n < 1 for n in self.ns) or self.w < 1:
            raise ValueError("n and w must be >= 1")


@dataclass
class MetricsReport:
    rep_n: Dict[int, float]
    rep_w: float
    rep_r: float
    ppl: Optional[float] = None
    num_sequences: int = 0
    skipped: int = 0
    name: str = ""
    extra: Dict[str, float] = field(default_factory=dict)

    CSV_COLUMNS = ("Rep-2", "Rep-3", "Rep-4", "Rep-w", "Rep-r", "PPL")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rep_n"] = {str(k): v for k, v in self.rep_n.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["rep_n"] = {int(k): v for k, v in d["rep_n"].items()}
        return cls(**d)

    def csv_row(self) -> List[str]:
        """Percentages with two decimals in the order Rep-2, Rep-3, Rep-4, Rep-w, Rep-r, PPL."""
        row = []
        for n in (2, 3, 4):
            v = self.rep_n.get(n)
            row.append("" if v is None else f"{100 * v:.2f}")
        row.append(f"{100 * self.rep_w:.2f}")
        row.append(f"{100 * self.rep_r:.2f}")
        row.append("" if self.ppl is None else f"{self.ppl:.2f}")
        return row

    def to_csv(self, with_name: bool = False) -> str:
        return reports_to_csv([self], with_name=with_name)


def reports_to_csv(reports: Sequence[MetricsReport], with_name: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(MetricsReport.CSV_COLUMNS)
    writer.writerow((["Model"] if with_name else []) + header)
    for r in reports:
        writer.writerow(([r.name] if with_name else []) + r.csv_row())
    return buf.getvalue()


def evaluate_sequences(seqs: Sequence, config: MetricConfig = MetricConfig(),
                       ppl: Optional[float] = None, name: str = "") -> MetricsReport:
    """Aggregate rep-n for each configured n plus rep-w and rep-r over ``seqs``."""
    seqs = [_ids(s) for s in seqs]
    rep = {}
    skipped = 0
    for n in config.ns:
        rep[n], sk = corpus_rep_n(seqs, n, return_skipped=True)
        skipped = max(skipped, sk)
    return MetricsReport(
        rep_n=rep,
        rep_w=corpus_rep_w(seqs, config.w),
        rep_r=corpus_rep_r(seqs),
        ppl=ppl,
        num_sequences=len(seqs),
        skipped=skipped,
        name=name,
    )


def perplexity_from_nll(total_nll: float, num_tokens: int) -> float:
    if num_tokens <= 0:
        raise ValueError("no predicted tokens")
    return math.exp(total_nll / num_tokens)


def perplexity(model, corpus, vocab_size: Optional[int] = None) -> float:
    """Teacher-forced perplexity of ``model`` over every document in ``corpus``.

    ``model`` must provide ``vocab_size`` and ``sequence_nll(ids) -> (nll_sum,
    n_predicted)``; tokens are predicted from the second position onward.
    """
    docs = getattr(corpus, "documents", corpus)
    expected = vocab_size if vocab_size is not None else getattr(corpus, "vocab_size", None)
    if expected is not None and expected != model.vocab_size:
        raise ValueError(f"vocabulary mismatch: model has {model.vocab_size}, corpus {expected}")
    total, count = 0.0, 0
    for doc in docs:
        ids = _ids(doc)
        if len(ids) < 2:
            continue
        if ids and max(ids) >= model.vocab_size:
            raise ValueError("vocabulary mismatch: token id out of range")
        nll, k = model.sequence_nll(ids)
        total += nll
        count += k
    return perplexity_from_nll(total, count)
