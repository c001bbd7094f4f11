"""Corpus ingestion, word-level vocabulary, rep-2 sharding and prompt extraction."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .metrics import rep_n

logger = logging.getLogger(__name__)

UNK = "<unk>"


class EmptyCorpusError(ValueError):
    pass


@dataclass
class TokenSeq:
    ids: List[int]
    text: str = ""

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, item):
        return self.ids[item]


@dataclass
class Vocabulary:
    id_to_token: List[str]
    unk_id: int = 0
    token_to_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        if not 0 <= self.unk_id < len(self.id_to_token):
            raise ValueError("unk_id out of range")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self):
        return self.size

    def save(self, path) -> None:
        """One token per line; a token's id is its line index."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return cls(tokens, unk_id=tokens.index(UNK) if UNK in tokens else 0)

    def extend(self, tokens: Iterable[str]) -> "Vocabulary":
        new = list(self.id_to_token)
        seen = set(new)
        for t in tokens:
            if t not in seen:
                new.append(t)
                seen.add(t)
        return Vocabulary(new, unk_id=self.unk_id)


def build_vocab(texts: Sequence[str], max_vocab: int) -> Vocabulary:
    """Keep the ``max_vocab - 1`` most frequent whitespace tokens plus ``<unk>``.

    Frequency ties are broken lexicographically. ``<unk>`` gets id 0.
    """
    if max_vocab < 2:
        raise ValueError("max_vocab must be >= 2")
    counts = Counter()
    for t in texts:
        counts.update(t.split())
    if not counts:
        raise EmptyCorpusError("empty corpus")
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([UNK] + [tok for tok, _ in ranked[:max_vocab - 1]], unk_id=0)


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    get = vocab.token_to_id.get
    return TokenSeq([get(t, vocab.unk_id) for t in text.split()], text=text)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in getattr(ids, "ids", ids))


class WordVocabulary(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` builds the vocabulary, ``transform`` maps
    texts to lists of ids and ``inverse_transform`` maps them back."""

    def __init__(self, max_vocab: int = 8000):
        self.max_vocab = max_vocab

    def fit(self, X, y=None):
        self.vocab_ = build_vocab(list(X), self.max_vocab)
        return self

    def _check(self):
        if not hasattr(self, "vocab_"):
            raise NotFittedError("WordVocabulary is not fitted yet")

    def transform(self, X):
        self._check()
        return [tokenize(t, self.vocab_).ids for t in X]

    def inverse_transform(self, X):
        self._check()
        return [detokenize(ids, self.vocab_) for ids in X]


@dataclass
class Corpus:
    documents: List[TokenSeq]
    name: str = ""
    vocab: Optional[Vocabulary] = None

    @property
    def total_words(self) -> int:
        return sum(len(d) for d in self.documents)

    @property
    def vocab_size(self) -> Optional[int]:
        return None if self.vocab is None else self.vocab.size

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)


def read_lines(path) -> List[str]:
    """Documents are the non-empty lines of a UTF-8 text file."""
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def load_corpus(path, vocab: Vocabulary, name: Optional[str] = None) -> Corpus:
    docs = [tokenize(line, vocab) for line in read_lines(path)]
    return Corpus(docs, name=name or os.path.basename(str(path)), vocab=vocab)


def chunk_document(ids: Sequence[int], max_len: int = 256, min_len: int = 2) -> List[List[int]]:
    """Split into consecutive ``max_len`` windows; drop a tail shorter than ``min_len``."""
    ids = list(ids)
    chunks = [ids[i:i + max_len] for i in range(0, len(ids), max_len)]
    return [c for c in chunks if len(c) >= min_len]


@dataclass
class Shard:
    documents: List[TokenSeq]
    rep2_mean: float
    word_count: int


def _doc_rep2(doc) -> float:
    return rep_n(doc, 2) if len(doc) >= 2 else 0.0


def shard_by_rep2(corpus: Corpus, k: int) -> List[Shard]:
    """Sort documents by rep-2 and cut them into ``k`` contiguous, word-balanced shards.

    A shard is closed once it reaches its share of the remaining words, so
    word counts differ by at most about one document length. ``rep2_mean`` is
    the unweighted mean of per-document rep-2.
    """
    docs = list(corpus.documents)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(docs):
        raise ValueError(f"cannot split {len(docs)} documents into {k} shards")
    scored = sorted(((_doc_rep2(d), i) for i, d in enumerate(docs)))
    order = [docs[i] for _, i in scored]
    scores = [s for s, _ in scored]

    shards: List[Shard] = []
    start = 0
    remaining_words = sum(len(d) for d in order)
    for s in range(k):
        left = k - s
        if left == 1:
            end = len(order)
        else:
            target = remaining_words / left
            end, acc = start, 0
            # leave at least one document for every later shard
            limit = len(order) - (left - 1)
            while end < limit:
                nxt = len(order[end])
                if end > start and abs(acc + nxt - target) > abs(acc - target):
                    break
                acc += nxt
                end += 1
        chunk = order[start:end]
        words = sum(len(d) for d in chunk)
        mean = sum(scores[start:end]) / len(chunk)
        shards.append(Shard(chunk, rep2_mean=mean, word_count=words))
        remaining_words -= words
        start = end
    return shards


def write_shards(shards: Sequence[Shard], vocab: Vocabulary, out_dir, prefix: str = "shard") -> dict:
    """One text file per shard plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, sh in enumerate(shards):
        fname = f"{prefix}_{i}.txt"
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as f:
            for d in sh.documents:
                f.write((d.text or detokenize(d, vocab)) + "\n")
        entries.append({"index": i, "file": fname, "word_count": sh.word_count,
                        "rep2_mean": sh.rep2_mean, "num_documents": len(sh.documents)})
    manifest = {"shards": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


@dataclass
class PromptSet:
    prompts: List[TokenSeq]
    references: List[TokenSeq]
    prompt_len: int = 32
    gen_len: int = 128
    skipped: int = 0

    def __len__(self):
        return len(self.prompts)


def extract_prompts(test_corpus, prompt_len: int = 32, gen_len: int = 128,
                    limit: Optional[int] = None) -> PromptSet:
    """First ``prompt_len`` tokens of each long-enough document, plus the next
    ``gen_len`` tokens as reference. Shorter documents are skipped and counted."""
    prompts, refs, skipped = [], [], 0
    for doc in getattr(test_corpus, "documents", test_corpus):
        ids = list(getattr(doc, "ids", doc))
        if len(ids) < prompt_len + 1:
            skipped += 1
            continue
        prompts.append(TokenSeq(ids[:prompt_len]))
        refs.append(TokenSeq(ids[prompt_len:prompt_len + gen_len]))
        if limit is not None and len(prompts) >= limit:
            break
    if not prompts:
        raise ValueError("no document is longer than the prompt length")
    if skipped:
        logger.info("skipped %d documents shorter than %d tokens", skipped, prompt_len + 1)
    return PromptSet(prompts, refs, prompt_len=prompt_len, gen_len=gen_len, skipped=skipped)
