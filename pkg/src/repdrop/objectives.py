"""Training objectives: MLE, token-level unlikelihood and ScaleGrad, with the
penalization scopes used to ablate which prefix tokens get penalized."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Set

import numpy as np
import torch
import torch.nn.functional as F

from .masking import repetitive_positions

logger = logging.getLogger(__name__)

KINDS = ("mle", "rep_dropout", "rand_dropout", "scalegrad", "unlikelihood")
SCOPES = (
    "prefix_all",
    "prefix_repetitive",
    "prefix_random_subset",
    "high_inflow_all",
    "high_inflow_repetitive",
    "high_inflow_random_subset",
)


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which loss to train with.

    ``p``/``n`` drive the dropout kinds, ``gamma`` ScaleGrad, ``alpha``
    unlikelihood; ``scope`` selects the penalized tokens for the latter two.
    """

    kind: str = "mle"
    p: float = 0.6
    n: int = 2
    gamma: float = 0.2
    alpha: float = 1.0
    scope: str = "prefix_all"
    scope_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if self.scope not in SCOPES:
            raise ObjectiveError(f"unknown scope {self.scope!r}; expected one of {SCOPES}")
        if not 0.0 <= self.p <= 1.0:
            raise ObjectiveError("p must be in [0, 1]")
        if self.n < 1:
            raise ObjectiveError("n must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ObjectiveError("gamma must be in (0, 1]")
        if self.alpha < 0:
            raise ObjectiveError("alpha must be >= 0")

    @property
    def uses_masks(self) -> bool:
        return self.kind in ("rep_dropout", "rand_dropout")

    @property
    def mask_kind(self) -> Optional[str]:
        return {"rep_dropout": "rep", "rand_dropout": "rand"}.get(self.kind)

    @property
    def needs_inflow(self) -> bool:
        return self.kind in ("scalegrad", "unlikelihood") and self.scope.startswith("high_inflow")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(**{k: type(getattr(cls(), k))(v) for k, v in d.items()})


def select_scope(seq, t: int, scope: str = "prefix_all", n: int = 2,
                 high_inflow: Optional[Set[int]] = None, rng=None) -> Set[int]:
    """Token types penalized when predicting position ``t`` (1-indexed).

    The prefix is ``x_1 .. x_{t-1}``. Repetitive variants keep prefix tokens
    at positions covered by an n-gram that occurs twice or more in ``seq``;
    random-subset variants draw as many prefix types as the repetitive
    variant selects.
    """
    ids = list(getattr(seq, "ids", seq))
    if not 2 <= t <= len(ids):
        raise ValueError(f"t={t} outside [2, {len(ids)}]")
    if scope not in SCOPES:
        raise ObjectiveError(f"unknown scope {scope!r}")
    if scope.startswith("high_inflow") and high_inflow is None:
        raise ObjectiveError("high-inflow scopes need the high-inflow token set")
    prefix = ids[:t - 1]
    allowed = None if not scope.startswith("high_inflow") else set(high_inflow)

    def keep(tokens: Iterable[int]) -> Set[int]:
        return {x for x in tokens if allowed is None or x in allowed}

    full = keep(prefix)
    if scope.endswith("_all"):
        return full
    rep_pos = repetitive_positions(ids, n)[:t - 1]
    repetitive = keep(x for x, r in zip(prefix, rep_pos) if r)
    if scope.endswith("_repetitive"):
        return repetitive
    rng = rng if isinstance(rng, random.Random) else random.Random(rng)
    return set(rng.sample(sorted(full), len(repetitive)))


def _prefix_types(inputs: torch.Tensor, include: torch.Tensor, vocab_size: int) -> torch.Tensor:
    # (B, T, V) bool: token types seen at positions <= t among included positions
    onehot = F.one_hot(inputs, vocab_size).to(torch.uint8) * include[..., None].to(torch.uint8)
    return onehot.cummax(dim=1).values.bool()


def scope_matrix(inputs: torch.Tensor, valid: torch.Tensor, vocab_size: int, scope: str,
                 n: int = 2, high_inflow: Optional[Iterable[int]] = None,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Vectorized scopes for a padded batch.

    Row ``[b, j]`` is the candidate set for the prediction made at position
    ``j``, i.e. the types in ``inputs[b, :j + 1]`` (the target is ``inputs[b,
    j + 1]``).
    """
    if scope not in SCOPES:
        raise ObjectiveError(f"unknown scope {scope!r}")
    if scope.startswith("high_inflow") and high_inflow is None:
        raise ObjectiveError("high-inflow scopes need the high-inflow token set")
    full = _prefix_types(inputs, valid, vocab_size)
    allowed = None
    if scope.startswith("high_inflow"):
        allowed = torch.zeros(vocab_size, dtype=torch.bool)
        idx = torch.as_tensor(sorted(high_inflow), dtype=torch.long)
        if len(idx):
            allowed[idx] = True
        full = full & allowed
    if scope.endswith("_all"):
        return full
    rep = torch.zeros_like(valid)
    for b in range(inputs.shape[0]):
        L = int(valid[b].sum())
        rep[b, :L] = torch.from_numpy(repetitive_positions(inputs[b, :L].tolist(), n))
    repetitive = _prefix_types(inputs, rep & valid, vocab_size)
    if allowed is not None:
        repetitive = repetitive & allowed
    if scope.endswith("_repetitive"):
        return repetitive
    k = repetitive.sum(-1, keepdim=True)
    noise = torch.rand(full.shape, generator=generator)
    noise = noise.masked_fill(~full, 2.0)
    kth = noise.sort(dim=-1).values.gather(-1, (k - 1).clamp(min=0))
    return full & (noise <= kth) & (k > 0)


def sets_to_matrix(scopes: List[Set[int]], vocab_size: int) -> torch.Tensor:
    out = torch.zeros(len(scopes), vocab_size, dtype=torch.bool)
    for i, s in enumerate(scopes):
        if s:
            out[i, torch.as_tensor(sorted(s))] = True
    return out


def mle_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token NLL. ``logits`` is (N, V), ``targets`` is (N,)."""
    return F.cross_entropy(logits, targets)


def unlikelihood_loss(logits: torch.Tensor, targets: torch.Tensor, scopes,
                      alpha: float = 1.0) -> torch.Tensor:
    """MLE plus ``alpha * sum_c -log(1 - p(c))`` over the negatives of each position.

    Negatives are the scope tokens minus the true target; both terms are
    averaged over the N positions. ``1 - p`` is clamped at 1e-12.
    """
    if not torch.is_tensor(scopes):
        scopes = sets_to_matrix(scopes, logits.shape[-1])
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets[:, None]).squeeze(-1)
    negatives = scopes.clone()
    negatives[torch.arange(len(targets)), targets] = False
    one_minus = 1.0 - logp.exp()
    clamped = (one_minus < 1e-12) & negatives
    if clamped.any():
        logger.warning("unlikelihood: clamped %d negatives with probability ~1", int(clamped.sum()))
    ul = -(one_minus.clamp(min=1e-12).log()) * negatives
    return (nll + alpha * ul.sum(-1)).mean()


def scalegrad_rescale(probs, non_novel, gamma: float):
    """Down-weight ``non_novel`` tokens by ``gamma`` and renormalize.

    ``probs`` is a distribution over the vocabulary (last axis); ``non_novel``
    is a set of ids or a boolean array of the same shape.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or not np.allclose(p.sum(-1), 1.0, atol=1e-9):
        raise ValueError("input is not a probability distribution")
    if isinstance(non_novel, (set, frozenset, list, tuple)):
        mask = np.zeros(p.shape[-1], dtype=bool)
        mask[list(non_novel)] = True
    else:
        mask = np.asarray(non_novel, dtype=bool)
    scaled = np.where(mask, gamma * p, p)
    return scaled / scaled.sum(-1, keepdims=True)


def scalegrad_loss(logits: torch.Tensor, targets: torch.Tensor, non_novel: torch.Tensor,
                   gamma: float) -> torch.Tensor:
    """Mean NLL of the target under the ScaleGrad-rescaled distribution."""
    if gamma != 1.0:
        logits = logits + math.log(gamma) * non_novel.to(logits.dtype)
    return F.cross_entropy(logits, targets)
