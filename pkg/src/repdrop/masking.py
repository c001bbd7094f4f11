"""Repetition dropout masks.

A repetition mask is a length-L additive vector over ``{0, NEG_INF}`` that
hides attention *keys* at positions covered by repeated n-grams. Masks are
generated per sequence and per transformer layer, only during training.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

# Additive sentinel standing in for -inf; exp() of it underflows to exactly 0.
NEG_INF = -1e9

Span = Tuple[int, int]


def _ids(seq) -> List[int]:
    return list(getattr(seq, "ids", seq))


def find_ngrams(seq, n: int) -> Dict[tuple, List[Span]]:
    """Map every n-gram of ``seq`` to its half-open spans, in order of occurrence.

    Overlapping occurrences are all recorded. A sequence shorter than ``n``
    yields an empty index.
    """
    x = _ids(seq)
    ngram_dict: Dict[tuple, List[Span]] = {}
    for i in range(n - 1, len(x)):
        ngram = tuple(x[i - n + 1:i + 1])
        ngram_dict.setdefault(ngram, []).append((i - n + 1, i + 1))
    return ngram_dict


def repeated_spans(seq, n: int) -> Dict[tuple, List[Span]]:
    return {k: v for k, v in find_ngrams(seq, n).items() if len(v) > 1}


def repetitive_positions(seq, n: int) -> np.ndarray:
    """Boolean vector marking positions covered by an n-gram that occurs twice or more."""
    x = _ids(seq)
    covered = np.zeros(len(x), dtype=bool)
    for spans in repeated_spans(x, n).values():
        for i, j in spans:
            covered[i:j] = True
    return covered


def count_repetitive_tokens(seq, n: int = 2) -> int:
    return int(repetitive_positions(seq, n).sum())


@dataclass
class RepetitionMask:
    values: np.ndarray
    p: float
    n: int
    seed: int | None = None
    kind: str = "rep"

    @property
    def masked(self) -> np.ndarray:
        return self.values < 0

    def __len__(self):
        return len(self.values)

    def to_bytes(self) -> bytes:
        """``uint32`` little-endian length followed by one 0/1 byte per position."""
        return struct.pack("<I", len(self.values)) + self.masked.astype(np.uint8).tobytes()

    def metadata(self) -> dict:
        return {"p": self.p, "n": self.n, "seed": self.seed, "kind": self.kind,
                "length": len(self.values), "sentinel": NEG_INF}

    @classmethod
    def from_bytes(cls, data: bytes, meta: dict) -> "RepetitionMask":
        (length,) = struct.unpack("<I", data[:4])
        flags = np.frombuffer(data[4:4 + length], dtype=np.uint8)
        if len(flags) != length:
            raise ValueError("truncated mask record")
        values = np.where(flags == 1, NEG_INF, 0.0)
        return cls(values, p=meta["p"], n=meta["n"], seed=meta.get("seed"),
                   kind=meta.get("kind", "rep"))


def save_mask(mask: RepetitionMask, path) -> None:
    with open(path, "wb") as f:
        f.write(mask.to_bytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(mask.metadata(), f, sort_keys=True)


def load_mask(path) -> RepetitionMask:
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    with open(path, "rb") as f:
        return RepetitionMask.from_bytes(f.read(), meta)


def _as_rng(rng) -> random.Random:
    if isinstance(rng, random.Random):
        return rng
    return random.Random(rng)


def gen_mask_rep(seq, p: float, n: int, rng=None) -> RepetitionMask:
    """Drop out repeated n-grams at rate ``p``.

    One uniform draw per repeated n-gram *type*; when it falls below ``p``
    every occurrence of that n-gram (the first one included) is masked.
    ``rng`` is a ``random.Random`` or an integer seed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = rng if isinstance(rng, int) else None
    rng = _as_rng(rng)
    x = _ids(seq)
    mask_rep = np.zeros(len(x))
    for idx in find_ngrams(x, n).values():
        if len(idx) > 1:
            if rng.uniform(0, 1) < p:
                for i, j in idx:
                    mask_rep[i:j] = NEG_INF
    return RepetitionMask(mask_rep, p=p, n=n, seed=seed, kind="rep")


def gen_mask_rand(seq, p: float, n: int, rng=None) -> RepetitionMask:
    """Control mask: hide as many uniformly random positions as repetition
    dropout would hide in expectation, ``round(p * #repetitive positions)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    seed = rng if isinstance(rng, int) else None
    rng = _as_rng(rng)
    x = _ids(seq)
    k = int(round(p * count_repetitive_tokens(x, n))) if len(x) >= n else 0
    values = np.zeros(len(x))
    if k:
        values[rng.sample(range(len(x)), k)] = NEG_INF
    return RepetitionMask(values, p=p, n=n, seed=seed, kind="rand")


def derive_seed(base_seed: int, sequence_index: int, layer_index: int) -> int:
    """Deterministic per-(sequence, layer) seed: first 8 bytes of
    SHA-256 over the three integers."""
    digest = hashlib.sha256(f"{base_seed}:{sequence_index}:{layer_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class LayerMaskSet:
    per_layer: List[RepetitionMask] = field(default_factory=list)

    def __len__(self):
        return len(self.per_layer)

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in self.per_layer])


def layer_masks(seq, num_layers: int, p: float, n: int, base_seed: int,
                sequence_index: int = 0, kind: str = "rep") -> LayerMaskSet:
    """Independent masks for every layer, seeded via :func:`derive_seed`."""
    gen = {"rep": gen_mask_rep, "rand": gen_mask_rand}[kind]
    return LayerMaskSet([
        gen(seq, p, n, derive_seed(base_seed, sequence_index, layer))
        for layer in range(num_layers)
    ])


def causal_mask(L: int) -> np.ndarray:
    """``M[i][j] = 0`` for ``j <= i`` and ``NEG_INF`` otherwise."""
    return np.triu(np.full((L, L), NEG_INF), k=1)


def assemble_attention_mask(causal: np.ndarray, rep) -> np.ndarray:
    """Add a repetition mask over the key axis and re-open the diagonal.

    ``M'[i][j] = M[i][j] + rep[j]`` with ``M'[i][i] = 0`` so that no softmax
    row is entirely masked.
    """
    values = np.asarray(getattr(rep, "values", rep), dtype=float)
    causal = np.asarray(causal, dtype=float)
    L = causal.shape[0]
    if causal.shape != (L, L) or values.shape != (L,):
        raise ValueError(f"mask length {values.shape} does not match causal mask {causal.shape}")
    out = causal + values[None, :]
    np.fill_diagonal(out, 0.0)
    return out
