"""Central finite differences over every parameter entry, vectorized with vmap."""

import torch
import torch.nn.functional as F
from torch.func import functional_call, vmap


def mean_nll(model, params, ids, key_masks):
    logits = functional_call(model, params, (ids, key_masks))
    V = logits.shape[-1]
    return F.cross_entropy(logits[:, :-1].reshape(-1, V), ids[:, 1:].reshape(-1))


@torch.no_grad()
def finite_difference_grads(model, ids, key_masks=None, eps=1e-4, chunk=2048, order=4):
    """Central differences with step ``eps``; ``order=4`` uses the five-point
    stencil, ``order=2`` the classic three-point one."""
    base = {k: v.detach().clone() for k, v in model.named_parameters()}
    buffers = {k: v for k, v in model.named_buffers()}
    out = {}
    for name, value in base.items():
        flat = value.reshape(-1)
        fd = torch.empty_like(flat)
        for start in range(0, flat.numel(), chunk):
            idx = torch.arange(start, min(start + chunk, flat.numel()))
            bumps = torch.zeros(len(idx), flat.numel(), dtype=flat.dtype)
            bumps[torch.arange(len(idx)), idx] = eps

            def loss_at(delta):
                params = dict(base)
                params[name] = (flat + delta).reshape(value.shape)
                return mean_nll(model, {**params, **buffers}, ids, key_masks)

            d1 = vmap(loss_at)(bumps) - vmap(loss_at)(-bumps)
            if order == 2:
                fd[idx] = d1 / (2 * eps)
            else:
                d2 = vmap(loss_at)(2 * bumps) - vmap(loss_at)(-2 * bumps)
                fd[idx] = (8 * d1 - d2) / (12 * eps)
        out[name] = fd.reshape(value.shape)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor, dtype=a.dtype))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst
