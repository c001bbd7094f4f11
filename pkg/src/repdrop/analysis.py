"""Corpus and model analyses: word inflow, high-inflow pair merging,
set-overlap reports, the self-reinforcement probe and amplification ratios."""

from __future__ import annotations

import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from scipy import stats
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .masking import NEG_INF, repeated_spans

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


def _docs(corpus) -> List[List[int]]:
    return [list(getattr(d, "ids", d)) for d in getattr(corpus, "documents", corpus)]


@dataclass
class InflowTable:
    inflow: Dict[int, float]
    bigram_counts: Counter
    successor_totals: Counter

    def conditional(self, v: int, w: int) -> float:
        total = self.successor_totals.get(v, 0)
        return self.bigram_counts.get((v, w), 0) / total if total else 0.0

    def high_inflow_tokens(self, threshold: float) -> Set[int]:
        return {w for w, f in self.inflow.items() if f > threshold}


def compute_inflow(corpus) -> InflowTable:
    """``inflow(w) = sum_v P(w | v)`` from bigram relative frequencies within documents.

    Tokens that never follow another token have inflow 0.
    """
    docs = _docs(corpus)
    if not docs:
        raise ValueError("empty corpus")
    bigrams: Counter = Counter()
    for d in docs:
        bigrams.update(zip(d, d[1:]))
    totals: Counter = Counter()
    for (v, _), c in bigrams.items():
        totals[v] += c
    inflow: Dict[int, float] = defaultdict(float)
    for d in docs:
        for tok in d:
            inflow.setdefault(tok, 0.0)
    for (v, w), c in sorted(bigrams.items()):
        inflow[w] += c / totals[v]
    return InflowTable(dict(inflow), bigrams, totals)


def merge_pairs(corpus, pairs: Iterable[Pair], fused_ids: Optional[Dict[Pair, int]] = None,
                base_vocab_size: Optional[int] = None, allow=None):
    """Fuse every occurrence of the selected bigrams into one token.

    Scans left to right, merging non-overlapping occurrences greedily.
    ``allow(doc_index, position, pair)`` can veto individual occurrences.
    Returns ``(docs, fused_ids)`` where ``fused_ids`` maps each pair to its new id.
    """
    docs = _docs(corpus)
    pairs = set(pairs)
    if fused_ids is None:
        start = base_vocab_size if base_vocab_size is not None else 1 + max((max(d) for d in docs if d), default=-1)
        fused_ids = {pr: start + i for i, pr in enumerate(sorted(pairs))}
    out = []
    for di, d in enumerate(docs):
        merged, i = [], 0
        while i < len(d):
            pr = (d[i], d[i + 1]) if i + 1 < len(d) else None
            if pr in pairs and (allow is None or allow(di, i, pr)):
                merged.append(fused_ids[pr])
                i += 2
            else:
                merged.append(d[i])
                i += 1
        out.append(merged)
    return out, fused_ids


def unmerge(docs, fused_ids: Dict[Pair, int]) -> List[List[int]]:
    inverse = {v: k for k, v in fused_ids.items()}
    out = []
    for d in docs:
        row = []
        for t in d:
            row.extend(inverse.get(t, (t,)))
        out.append(row)
    return out


def merged_word_fraction(original, merged) -> float:
    """Share of original words absorbed into fused tokens."""
    total = sum(len(d) for d in original)
    after = sum(len(d) for d in merged)
    return 2 * (total - after) / total if total else 0.0


def select_high_inflow_pairs(table: InflowTable, threshold: Optional[float] = None,
                             corpus=None, target_coverage: Optional[float] = None):
    """Observed bigrams ``(v, w)`` whose second word has inflow above ``threshold``.

    With ``target_coverage`` (a word fraction) and ``corpus``, the threshold is
    chosen as the largest inflow value whose selection covers at least that
    fraction of corpus words. Returns ``(pairs, threshold, coverage)``;
    coverage is None without a corpus.
    """
    if target_coverage is not None:
        if corpus is None:
            raise ValueError("target_coverage needs the corpus")
        values = sorted(set(table.inflow.values()), reverse=True)
        chosen = values[-1] - 1.0
        lo, hi = 0, len(values) - 1
        # coverage grows as the threshold drops; binary search over candidate thresholds
        while lo <= hi:
            mid = (lo + hi) // 2
            thr = values[mid + 1] if mid + 1 < len(values) else values[-1] - 1.0
            pairs = {pr for pr in table.bigram_counts if table.inflow.get(pr[1], 0.0) > thr}
            cov = merged_word_fraction(_docs(corpus), merge_pairs(corpus, pairs)[0])
            if cov >= target_coverage:
                chosen, hi = thr, mid - 1
            else:
                lo = mid + 1
        threshold = chosen
    if threshold is None:
        raise ValueError("give a threshold or a target coverage")
    pairs = {pr for pr in table.bigram_counts if table.inflow.get(pr[1], 0.0) > threshold}
    if not pairs:
        logger.warning("high-inflow rule selected no pairs (threshold %.4g)", threshold)
    coverage = None
    if corpus is not None:
        coverage = merged_word_fraction(_docs(corpus), merge_pairs(corpus, pairs)[0])
    return pairs, threshold, coverage


class HighInflowMerger(TransformerMixin, BaseEstimator):
    """Re-encode a corpus by fusing high-inflow word pairs.

    ``variant`` picks which occurrences are fused: ``"all"`` every occurrence
    of a selected pair, ``"repetitive"`` only occurrences whose bigram
    appears at least twice in the same document, ``"random_subset"`` a random
    set of occurrences as large as the repetitive variant's.
    """

    def __init__(self, threshold=None, target_coverage=None, variant="all", base_vocab_size=None, seed=0):
        self.threshold = threshold
        self.target_coverage = target_coverage
        self.variant = variant
        self.base_vocab_size = base_vocab_size
        self.seed = seed

    def fit(self, X, y=None):
        if self.variant not in ("all", "repetitive", "random_subset"):
            raise ValueError(f"unknown variant {self.variant!r}")
        self.table_ = compute_inflow(X)
        self.pairs_, self.threshold_, self.coverage_ = select_high_inflow_pairs(
            self.table_, self.threshold, X, self.target_coverage)
        docs = _docs(X)
        start = self.base_vocab_size if self.base_vocab_size is not None else 1 + max(max(d) for d in docs if d)
        self.fused_ids_ = {pr: start + i for i, pr in enumerate(sorted(self.pairs_))}
        return self

    def _check(self):
        if not hasattr(self, "fused_ids_"):
            raise NotFittedError("HighInflowMerger is not fitted yet")

    def _repetitive_allow(self, docs):
        counts = [Counter(zip(d, d[1:])) for d in docs]
        return lambda di, i, pr: counts[di][pr] > 1

    def transform(self, X):
        self._check()
        docs = _docs(X)
        if self.variant == "all":
            return merge_pairs(docs, self.pairs_, self.fused_ids_)[0]
        rep_allow = self._repetitive_allow(docs)
        if self.variant == "repetitive":
            return merge_pairs(docs, self.pairs_, self.fused_ids_, allow=rep_allow)[0]
        # random subset: same number of fusions as the repetitive variant
        rep_docs = merge_pairs(docs, self.pairs_, self.fused_ids_, allow=rep_allow)[0]
        k = sum(len(d) for d in docs) - sum(len(d) for d in rep_docs)
        candidates = [(di, i) for di, d in enumerate(docs) for i in range(len(d) - 1) if (d[i], d[i + 1]) in self.pairs_]
        rng = random.Random(self.seed)
        chosen = set(rng.sample(candidates, min(k, len(candidates))))
        return merge_pairs(docs, self.pairs_, self.fused_ids_, allow=lambda di, i, pr: (di, i) in chosen)[0]

    def inverse_transform(self, X):
        self._check()
        return unmerge(X, self.fused_ids_)

    def pair_names(self, vocab) -> List[str]:
        return [f"{vocab.id_to_token[v]}_{vocab.id_to_token[w]}" for v, w in sorted(self.fused_ids_)]

    def extend_vocabulary(self, vocab):
        """``vocab`` plus one ``v_w`` token per fused pair, at the fused ids."""
        self._check()
        if self.fused_ids_ and min(self.fused_ids_.values()) != vocab.size:
            raise ValueError("fit with base_vocab_size equal to the vocabulary size")
        names = self.pair_names(vocab)
        if set(names) & set(vocab.id_to_token) or len(set(names)) != len(names):
            raise ValueError("fused token names collide with existing tokens")
        return vocab.extend(names)


def overlap_report(set_a: Iterable, set_b: Iterable, corpus=None) -> dict:
    """``|A & B| / |A|`` plus sizes; with ``corpus`` of pair-occurrence
    lists, also word-percent coverage of each set."""
    a, b = set(set_a), set(set_b)
    if not a:
        raise ValueError("first set is empty")
    inter = a & b
    report = {"size_a": len(a), "size_b": len(b), "size_intersection": len(inter),
              "fraction_of_a": len(inter) / len(a)}
    if corpus is not None:
        docs = _docs(corpus)
        total = sum(len(d) for d in docs)
        for name, s in (("a", a), ("b", b), ("intersection", inter)):
            merged = merge_pairs(docs, s)[0]
            report[f"word_percent_{name}"] = 100 * merged_word_fraction(docs, merged) if total else 0.0
    return report


def repetitive_pairs(corpus) -> Set[Pair]:
    """Bigram types that occur at least twice within some document."""
    out: Set[Pair] = set()
    for d in _docs(corpus):
        out.update(pr for pr, c in Counter(zip(d, d[1:])).items() if c > 1)
    return out


@dataclass
class ProbeResult:
    ngram: Tuple[int, ...]
    start: int
    masked_positions: List[int]
    p_unmasked: float
    p_masked: float

    @property
    def delta(self) -> float:
        return self.p_unmasked - self.p_masked

    def to_row(self, vocab=None) -> dict:
        text = " ".join(vocab.id_to_token[t] for t in self.ngram) if vocab is not None else " ".join(map(str, self.ngram))
        return {"position": self.start, "ngram": text, "p_unmasked": self.p_unmasked,
                "p_masked": self.p_masked, "delta": self.delta}


def span_probability(model, ids: Sequence[int], start: int, end: int, key_mask=None) -> float:
    probs = model.token_probs(ids, key_mask)
    return float(torch.prod(probs[start:end]).item())


def self_reinforcement_probe(model, seq, n: int = 2) -> List[ProbeResult]:
    """For each repeated n-gram, compare the teacher-forced probability of its
    last occurrence with and without attention to its earlier occurrences.

    The masked run hides the keys of every earlier occurrence in all layers.
    """
    ids = list(getattr(seq, "ids", seq))
    if len(ids) > model.cfg.max_len:
        ids = ids[:model.cfg.max_len]
    results = []
    base = model.token_probs(ids)
    for gram, spans in sorted(repeated_spans(ids, n).items(), key=lambda kv: kv[1][-1][0]):
        start, end = spans[-1]
        if start == 0:
            continue
        mask = np.zeros(len(ids))
        positions = sorted({k for i, j in spans[:-1] for k in range(i, j)})
        mask[positions] = NEG_INF
        masked = model.token_probs(ids, mask)
        results.append(ProbeResult(
            ngram=gram, start=start, masked_positions=positions,
            p_unmasked=float(torch.prod(base[start:end])),
            p_masked=float(torch.prod(masked[start:end])),
        ))
    return results


def probe_corpus(model, docs, n: int = 2, limit: int = 100):
    """Probe up to ``limit`` documents that contain a repeated n-gram.

    Each document contributes one value, the mean delta over its probe
    targets, so the values are independent across documents. Returns
    ``(per_document_deltas, rows)`` where rows carry the document index.
    """
    deltas, rows = [], []
    for i, doc in enumerate(docs):
        if len(deltas) >= limit:
            break
        ids = list(getattr(doc, "ids", doc))[:model.cfg.max_len]
        results = self_reinforcement_probe(model, ids, n)
        if not results:
            continue
        deltas.append(sum(r.delta for r in results) / len(results))
        rows.extend({"doc": i, **r.to_row()} for r in results)
    return deltas, rows


def sign_test(deltas: Sequence[float]) -> dict:
    """One-sided sign test that positive deltas dominate; zeros are dropped."""
    pos = sum(1 for d in deltas if d > 0)
    neg = sum(1 for d in deltas if d < 0)
    if pos + neg == 0:
        return {"positive": 0, "negative": 0, "p_value": 1.0}
    res = stats.binomtest(pos, pos + neg, 0.5, alternative="greater")
    return {"positive": pos, "negative": neg, "p_value": float(res.pvalue)}


def amplification_report(train_rep2: float, generated_rep2: float) -> dict:
    if train_rep2 <= 0:
        raise ValueError("undefined ratio: training rep-2 is zero")
    return {"train_rep2": train_rep2, "generated_rep2": generated_rep2,
            "ratio": generated_rep2 / train_rep2}


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return float(stats.spearmanr(x, y).statistic)
