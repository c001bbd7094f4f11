"""A small GPT-style decoder with per-layer additive attention masks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import NEG_INF

CHECKPOINT_MAGIC = b"REPDROP\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    d_model: int = 128
    d_ff: Optional[int] = None
    max_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def attn_scale(self) -> float:
        return math.sqrt(self.d_model / self.heads)

    @classmethod
    def gpt2_small(cls, vocab_size: int = 50257) -> "ModelConfig":
        return cls(vocab_size, layers=12, heads=12, d_model=768, max_len=256, dropout=0.1)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.d_model // cfg.heads
        self.beta = cfg.attn_scale
        self.w_q = nn.Linear(cfg.d_model, cfg.d_model)
        self.w_k = nn.Linear(cfg.d_model, cfg.d_model)
        self.w_v = nn.Linear(cfg.d_model, cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.resid_drop = nn.Dropout(cfg.dropout)

    def forward(self, h, mask, return_weights=False):
        B, T, D = h.shape

        def split(x):
            return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.w_q(h)), split(self.w_k(h)), split(self.w_v(h))
        # mask is (T, T) or (B, T, T); shared by all heads
        scores = (q @ k.transpose(-2, -1) + mask.unsqueeze(-3)) / self.beta
        weights = scores.softmax(dim=-1)
        out = (self.attn_drop(weights) @ v).transpose(1, 2).reshape(B, T, D)
        out = self.resid_drop(self.proj(out))
        return (out, weights) if return_weights else (out, None)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, h, mask, return_weights=False):
        a, w = self.attn(self.ln_1(h), mask, return_weights)
        h = h + a
        h = h + self.mlp(self.ln_2(h))
        return h, w


def build_attention_masks(T: int, key_masks: Optional[torch.Tensor], dtype=torch.float32):
    """Per-layer attention masks.

    Without ``key_masks`` returns the (T, T) causal mask. With ``key_masks``
    of shape (B, layers, T) returns (layers, B, T, T) masks
    ``causal + key_mask[key]`` with the diagonal reset to 0.
    """
    causal = torch.full((T, T), NEG_INF, dtype=dtype).triu(1)
    if key_masks is None:
        return causal
    m = causal + key_masks.to(dtype).transpose(0, 1)[:, :, None, :]
    idx = torch.arange(T)
    m[:, :, idx, idx] = 0.0
    return m


class TinyGPT(nn.Module):
    """Pre-norm decoder-only transformer; the output projection is tied to the
    token embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.apply(self._init)
        for name, p in self.named_parameters():
            if name.endswith("proj.weight") or name.endswith("mlp.2.weight"):
                nn.init.normal_(p, std=0.02 / math.sqrt(2 * cfg.layers))

    @staticmethod
    def _init(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def hidden(self, ids: torch.Tensor, key_masks: Optional[torch.Tensor] = None,
               return_weights: bool = False):
        B, T = ids.shape
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        if key_masks is not None and key_masks.shape != (B, self.cfg.layers, T):
            raise ValueError(f"key_masks must have shape {(B, self.cfg.layers, T)}, got {tuple(key_masks.shape)}")
        dtype = self.tok_emb.weight.dtype
        masks = build_attention_masks(T, key_masks, dtype)
        h = self.drop(self.tok_emb(ids) + self.pos_emb(torch.arange(T)))
        all_weights = []
        for layer, block in enumerate(self.blocks):
            m = masks if key_masks is None else masks[layer]
            h, w = block(h, m, return_weights)
            all_weights.append(w)
        h = self.ln_f(h)
        return (h, all_weights) if return_weights else h

    def forward(self, ids: torch.Tensor, key_masks: Optional[torch.Tensor] = None):
        """Logits of shape (B, T, V); ``key_masks`` is (B, layers, T) additive."""
        return self.hidden(ids, key_masks) @ self.tok_emb.weight.T

    def attention_weights(self, ids, key_masks=None) -> List[torch.Tensor]:
        return self.hidden(ids, key_masks, return_weights=True)[1]

    @torch.no_grad()
    def sequence_nll(self, ids: Sequence[int], key_masks=None) -> Tuple[float, int]:
        """Summed NLL of ``ids[1:]`` under teacher forcing, in ``max_len`` windows."""
        was_training = self.training
        self.eval()
        total, count = 0.0, 0
        ids = list(ids)
        L = self.cfg.max_len
        for start in range(0, len(ids), L):
            chunk = ids[start:start + L]
            if len(chunk) < 2:
                continue
            x = torch.tensor([chunk])
            logits = self(x)[0, :-1]
            total += F.cross_entropy(logits.double(), x[0, 1:], reduction="sum").item()
            count += len(chunk) - 1
        self.train(was_training)
        return total, count

    @torch.no_grad()
    def token_probs(self, ids: Sequence[int], key_masks=None) -> torch.Tensor:
        """Probability of each ``ids[i]`` (i >= 1) given ``ids[:i]``; entry 0 is NaN."""
        self.eval()
        x = torch.tensor([list(ids)])
        km = None if key_masks is None else torch.as_tensor(key_masks, dtype=torch.float32)[None]
        if km is not None and km.dim() == 2:
            km = km.expand(1, self.cfg.layers, -1)
        probs = self(x, km)[0].double().softmax(-1)
        out = torch.full((len(ids),), float("nan"), dtype=torch.float64)
        out[1:] = probs[:-1].gather(-1, x[0, 1:, None]).squeeze(-1)
        return out


@torch.no_grad()
def greedy_decode(model: TinyGPT, prompts, gen_len: int = 128, batch_size: int = 64) -> List[List[int]]:
    """Greedy continuation of each prompt; returns prompt + generated ids.

    No repetition masks are used. Ties go to the lowest token id. Contexts
    longer than ``max_len`` keep only the most recent ``max_len`` tokens.
    """
    single = bool(prompts) and isinstance(prompts[0], (int, np.integer))
    if single:
        prompts = [prompts]
    prompts = [list(getattr(p, "ids", p)) for p in prompts]
    if any(len(p) == 0 for p in prompts):
        raise ValueError("empty prompt")
    model.eval()
    L = model.cfg.max_len
    results: List[Optional[List[int]]] = [None] * len(prompts)
    # group by length so each batch is rectangular
    by_len: Dict[int, List[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for _, idxs in sorted(by_len.items()):
        for s in range(0, len(idxs), batch_size):
            group = idxs[s:s + batch_size]
            x = torch.tensor([prompts[i] for i in group])
            for _ in range(gen_len):
                h = model.hidden(x[:, -L:])[:, -1]
                nxt = (h @ model.tok_emb.weight.T).argmax(-1)
                x = torch.cat([x, nxt[:, None]], dim=1)
            for row, i in zip(x.tolist(), group):
                results[i] = row
    return results[0] if single else results


def save_checkpoint(path, model: TinyGPT, optimizer: Optional[torch.optim.Optimizer] = None,
                    step: int = 0, extra: Optional[dict] = None, rng_state: Optional[dict] = None) -> None:
    """Write ``magic | u32 header length | header JSON | raw little-endian blocks``.

    The header lists every block (name, dtype, shape, byte offset) after the
    config; blocks hold parameters, then Adam moments when ``optimizer`` is given.
    """
    blocks: List[Tuple[str, np.ndarray]] = []
    for name, t in model.state_dict().items():
        blocks.append((f"param/{name}", t.detach().cpu().numpy()))
    opt_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        opt_meta = {"param_groups": [], "steps": {}}
        for g in optimizer.param_groups:
            opt_meta["param_groups"].append({k: v for k, v in g.items() if k != "params"})
            for p in g["params"]:
                st = optimizer.state.get(p, {})
                n = names[id(p)]
                if "step" in st:
                    opt_meta["steps"][n] = float(st["step"])
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in st:
                        blocks.append((f"optim/{n}/{key}", st[key].detach().cpu().numpy()))
    if rng_state and "torch" in rng_state:
        blocks.append(("rng/torch", rng_state["torch"].numpy()))
    index, offset = [], 0
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        index.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "step": step,
        "optimizer": opt_meta,
        "python_rng": rng_state.get("python") if rng_state else None,
        "extra": extra or {},
        "blocks": index,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        data = f.read()
    arrays = {}
    for b in header["blocks"]:
        buf = data[b["offset"]:b["offset"] + b["nbytes"]]
        arrays[b["name"]] = np.frombuffer(buf, dtype=np.dtype(b["dtype"])).reshape(b["shape"]).copy()
    return header, arrays


def load_checkpoint(path, optimizer_factory=None):
    """Returns ``(model, header, optimizer_or_None)``."""
    header, arrays = read_checkpoint(path)
    model = TinyGPT(ModelConfig(**header["config"]))
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    optimizer = None
    if optimizer_factory is not None and header.get("optimizer"):
        optimizer = optimizer_factory(model.parameters())
        meta = header["optimizer"]
        for g, saved in zip(optimizer.param_groups, meta["param_groups"]):
            g.update(saved)
        for n, p in model.named_parameters():
            if n in meta["steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(meta["steps"][n]),
                    "exp_avg": torch.from_numpy(arrays[f"optim/{n}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"]),
                }
    if "rng/torch" in arrays:
        header["torch_rng"] = torch.from_numpy(arrays["rng/torch"])
    return model, header, optimizer
