"""Training loop and the scikit-learn style language-model estimator."""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import chunk_document
from .masking import layer_masks
from .metrics import perplexity
from .model import ModelConfig, TinyGPT, greedy_decode, load_checkpoint, save_checkpoint
from .objectives import (
    ObjectiveSpec,
    mle_loss,
    scalegrad_loss,
    scope_matrix,
    unlikelihood_loss,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 100_000
    lr: float = 5e-5
    batch_size: int = 128
    warmup: int = 10_000
    grad_clip: float = 1.0
    seed: int = 0
    eval_interval: int = 10_000
    seq_len: int = 256
    weight_decay: float = 0.0
    log_interval: int = 100
    max_eval_docs: Optional[int] = None

    def __post_init__(self):
        if self.warmup > self.steps:
            raise ValueError("warmup must not exceed steps")

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then linear decay to 0 at ``steps``."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        return self.lr * max(0.0, (self.steps - step) / span)


def pad_batch(seqs: Sequence[Sequence[int]]):
    """Right-pad with id 0; returns ``(ids, valid)`` tensors of shape (B, T)."""
    T = max(len(s) for s in seqs)
    ids = torch.zeros(len(seqs), T, dtype=torch.long)
    valid = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        valid[i, :len(s)] = True
    return ids, valid


def batch_key_masks(seqs, num_layers: int, objective: ObjectiveSpec, base_seed: int,
                    first_index: int = 0) -> Optional[torch.Tensor]:
    """(B, layers, T) additive key masks, drawn independently per sequence and layer."""
    if not objective.uses_masks:
        return None
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), num_layers, T))
    for i, s in enumerate(seqs):
        lm = layer_masks(list(s), num_layers, objective.p, objective.n, base_seed,
                         sequence_index=first_index + i, kind=objective.mask_kind)
        out[i, :, :len(s)] = lm.stack()
    return torch.from_numpy(out)


def compute_loss(model: TinyGPT, ids: torch.Tensor, valid: torch.Tensor, objective: ObjectiveSpec,
                 key_masks: Optional[torch.Tensor] = None, high_inflow=None,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Objective value over predicted positions 2..L of every sequence."""
    logits = model(ids, key_masks)
    pred = valid[:, 1:]
    flat_logits = logits[:, :-1][pred]
    targets = ids[:, 1:][pred]
    if objective.kind in ("mle", "rep_dropout", "rand_dropout"):
        return mle_loss(flat_logits, targets)
    scopes = scope_matrix(ids, valid, model.vocab_size, objective.scope, objective.n,
                          high_inflow=high_inflow, generator=generator)[:, :-1][pred]
    if objective.kind == "unlikelihood":
        return unlikelihood_loss(flat_logits, targets, scopes, objective.alpha)
    return scalegrad_loss(flat_logits, targets, scopes, objective.gamma)


def loss_and_grads(model: TinyGPT, batch, objective: ObjectiveSpec = ObjectiveSpec(),
                   key_masks: Optional[torch.Tensor] = None, high_inflow=None):
    """Loss and a name -> gradient dict for one batch of id sequences."""
    if objective.uses_masks != (key_masks is not None):
        raise ValueError("masks must be supplied exactly when the objective uses dropout masks")
    ids, valid = pad_batch(batch)
    model.zero_grad(set_to_none=True)
    loss = compute_loss(model, ids, valid, objective, key_masks, high_inflow)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} for objective {objective.kind}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
    return loss.detach(), grads


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def training_chunks(documents, seq_len: int) -> List[List[int]]:
    out = []
    for d in documents:
        out.extend(chunk_document(getattr(d, "ids", d), seq_len))
    return out


def train(model: TinyGPT, documents, cfg: TrainConfig, objective: ObjectiveSpec = ObjectiveSpec(),
          valid_docs=None, high_inflow=None, callback: Optional[Callable[[dict], None]] = None):
    """Optimize ``model`` in place and return the history of logged rows.

    Batches are drawn from shuffled ``seq_len`` chunks of ``documents``;
    fresh per-layer masks are drawn for every sequence when the objective
    uses dropout. Deterministic given ``cfg.seed``.
    """
    chunks = training_chunks(documents, cfg.seq_len)
    if not chunks:
        raise ValueError("no training sequences of length >= 2")
    if objective.needs_inflow and high_inflow is None:
        raise ValueError("high-inflow scope requires the high-inflow token set")
    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    scope_gen = torch.Generator().manual_seed(objective.scope_seed)
    optimizer = make_optimizer(model.parameters(), cfg)
    history: List[dict] = []
    order, cursor = order_rng.permutation(len(chunks)), 0
    initial_loss, bad_steps = None, 0
    smoothed = None
    start = time.time()
    model.train()
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order, cursor = order_rng.permutation(len(chunks)), 0
        batch = [chunks[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        ids, valid = pad_batch(batch)
        masks = batch_key_masks(batch, model.cfg.layers, objective, cfg.seed, step * cfg.batch_size)
        for g in optimizer.param_groups:
            g["lr"] = cfg.lr_at(step)
        loss = compute_loss(model, ids, valid, objective, masks, high_inflow, scope_gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step} (objective {objective.kind})")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        value = loss.item()
        if initial_loss is None:
            initial_loss = value
        bad_steps = bad_steps + 1 if value > 10 * initial_loss else 0
        if bad_steps >= 1000:
            raise TrainingDiverged(f"loss {value:.3f} above 10x initial {initial_loss:.3f} for 1000 steps")
        smoothed = value if smoothed is None else 0.98 * smoothed + 0.02 * value

        last = step + 1 == cfg.steps
        do_eval = valid_docs is not None and (last or (cfg.eval_interval and (step + 1) % cfg.eval_interval == 0))
        if do_eval or (step + 1) % cfg.log_interval == 0 or last:
            row = {"step": step + 1, "loss": value, "smoothed_loss": smoothed, "lr": cfg.lr_at(step),
                   "val_ppl": None}
            if do_eval:
                docs = valid_docs if cfg.max_eval_docs is None else list(valid_docs)[:cfg.max_eval_docs]
                row["val_ppl"] = perplexity(model, docs)
                model.train()
            history.append(row)
            logger.info("step %d loss %.4f ppl %s (%.0fs)", step + 1, value, row["val_ppl"], time.time() - start)
            if callback:
                callback(row)
    model.eval()
    return history, optimizer


class LanguageModel(BaseEstimator):
    """Decoder-only LM trained with MLE, repetition dropout or a baseline objective.

    ``fit`` takes a list of token-id sequences; ``generate`` decodes greedily;
    ``perplexity`` and ``score`` evaluate teacher-forced likelihood.
    """

    def __init__(self, vocab_size=None, layers=2, heads=4, d_model=128, d_ff=None, max_len=256,
                 dropout=0.0, objective="mle", p=0.6, n=2, gamma=0.2, alpha=1.0,
                 scope="prefix_all", steps=100_000, lr=5e-5, batch_size=128, warmup=None,
                 grad_clip=1.0, seed=0, eval_interval=10_000, seq_len=None, weight_decay=0.0,
                 max_eval_docs=None, dtype="float32"):
        self.vocab_size = vocab_size
        self.layers = layers
        self.heads = heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_len = max_len
        self.dropout = dropout
        self.objective = objective
        self.p = p
        self.n = n
        self.gamma = gamma
        self.alpha = alpha
        self.scope = scope
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup = warmup
        self.grad_clip = grad_clip
        self.seed = seed
        self.eval_interval = eval_interval
        self.seq_len = seq_len
        self.weight_decay = weight_decay
        self.max_eval_docs = max_eval_docs
        self.dtype = dtype

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size or self.vocab_size, layers=self.layers, heads=self.heads,
                           d_model=self.d_model, d_ff=self.d_ff, max_len=self.max_len, dropout=self.dropout)

    def train_config(self) -> TrainConfig:
        warmup = self.warmup if self.warmup is not None else max(1, self.steps // 10) if self.steps else 0
        return TrainConfig(steps=self.steps, lr=self.lr, batch_size=self.batch_size, warmup=warmup,
                           grad_clip=self.grad_clip, seed=self.seed, eval_interval=self.eval_interval,
                           seq_len=self.seq_len or self.max_len, weight_decay=self.weight_decay,
                           max_eval_docs=self.max_eval_docs)

    def objective_spec(self) -> ObjectiveSpec:
        return ObjectiveSpec(kind=self.objective, p=self.p, n=self.n, gamma=self.gamma,
                             alpha=self.alpha, scope=self.scope, scope_seed=self.seed)

    def init_model(self, vocab_size: Optional[int] = None) -> TinyGPT:
        torch.manual_seed(self.seed)
        model = TinyGPT(self.model_config(vocab_size))
        return model.double() if self.dtype == "float64" else model

    def fit(self, X, y=None, valid=None, high_inflow=None, callback=None):
        docs = [list(getattr(d, "ids", d)) for d in getattr(X, "documents", X)]
        vocab_size = self.vocab_size or (max(max(d) for d in docs if d) + 1)
        objective = self.objective_spec()
        cfg = self.train_config()
        self.model_ = self.init_model(vocab_size)
        valid_docs = None if valid is None else [list(getattr(d, "ids", d)) for d in getattr(valid, "documents", valid)]
        self.history_, self.optimizer_ = train(self.model_, docs, cfg, objective, valid_docs,
                                               high_inflow=high_inflow, callback=callback)
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("LanguageModel is not fitted yet")

    def generate(self, prompts, gen_len: int = 128) -> List[List[int]]:
        """Greedy continuations (without the prompt) for each prompt."""
        self._check()
        prompts = [list(getattr(p, "ids", p)) for p in prompts]
        full = greedy_decode(self.model_, prompts, gen_len)
        return [f[len(p):] for f, p in zip(full, prompts)]

    predict = generate

    def perplexity(self, X) -> float:
        self._check()
        return perplexity(self.model_, X)

    def score(self, X, y=None) -> float:
        """Negative mean token NLL (higher is better)."""
        return -math.log(self.perplexity(X))

    def save(self, path, extra: Optional[dict] = None) -> None:
        self._check()
        meta = {"estimator": self.get_params(), **(extra or {})}
        save_checkpoint(path, self.model_, getattr(self, "optimizer_", None),
                        step=self.steps, extra=meta)

    @classmethod
    def load(cls, path) -> "LanguageModel":
        model, header, _ = load_checkpoint(path)
        params = dict(header.get("extra", {}).get("estimator", {}))
        est = cls(**params)
        est.model_ = model
        est.history_ = []
        return est
