import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from repdrop.masking import NEG_INF, gen_mask_rep
from repdrop.model import (ModelConfig, TinyGPT, build_attention_masks, greedy_decode, load_checkpoint,
                           read_checkpoint, save_checkpoint)
from repdrop.objectives import ObjectiveSpec
from repdrop.training import batch_key_masks, loss_and_grads, make_optimizer, TrainConfig

from gradcheck import finite_difference_grads, max_relative_error


def tiny(V=11, layers=2, heads=2, d=16, max_len=24, seed=0):
    torch.manual_seed(seed)
    return TinyGPT(ModelConfig(V, layers, heads, d, max_len=max_len)).eval()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, heads=3, d_model=16)
    with pytest.raises(ValueError):
        ModelConfig(10, max_len=1)
    assert ModelConfig(10, heads=4, d_model=64).attn_scale == 4.0
    assert ModelConfig(10, d_model=32).d_ff == 128


def test_overlong_sequence_rejected():
    m = tiny(max_len=8)
    with pytest.raises(ValueError, match="max_len"):
        m(torch.zeros(1, 9, dtype=torch.long))


def test_single_token_input():
    m = tiny()
    out = m(torch.tensor([[3]]))
    assert out.shape == (1, 1, 11) and torch.isfinite(out).all()


def test_identical_rows_identical_logits():
    m = tiny()
    x = torch.tensor([[1, 2, 3, 4]] * 3)
    out = m(x)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=2, max_size=20), st.data())
def test_causality(seq, data):
    m = tiny()
    j = data.draw(st.integers(0, len(seq) - 1))
    other = data.draw(st.integers(0, 10).filter(lambda t: t != seq[j]))
    a = torch.tensor([seq])
    b = a.clone()
    b[0, j] = other
    with torch.no_grad():
        la, lb = m(a), m(b)
    assert torch.equal(la[0, :j], lb[0, :j])


def test_attention_rows_stochastic_and_masked_keys_excluded():
    m = tiny().double()
    seq = [1, 2, 1, 2, 3, 1, 2, 4, 5, 3]
    rm = gen_mask_rep(seq, 1.0, 2, 0)
    km = torch.tensor(np.stack([rm.values, rm.values]))[None]
    with torch.no_grad():
        weights = m.attention_weights(torch.tensor([seq]), km)
    masked = [j for j, v in enumerate(rm.values) if v != 0]
    assert masked
    for w in weights:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
        for i in range(len(seq)):
            for j in masked:
                if j != i:
                    assert w[0, :, i, j].max() <= 1e-6
        assert torch.all(w.triu(1) <= 1e-6)


def test_build_attention_masks_diagonal_and_causal():
    km = torch.full((1, 2, 4), NEG_INF)
    m = build_attention_masks(4, km)
    assert m.shape == (2, 1, 4, 4)
    assert torch.all(torch.diagonal(m, dim1=-2, dim2=-1) == 0)
    upper = torch.ones(4, 4, dtype=torch.bool).triu(1)
    assert torch.all(m[..., upper] <= NEG_INF)


def test_zero_masks_forward_bit_identical():
    m = tiny()
    x = torch.tensor([[1, 2, 1, 2, 3, 4]])
    with torch.no_grad():
        plain = m(x)
        zero = m(x, torch.zeros(1, 2, 6))
    assert torch.equal(plain, zero)


def test_uniform_model_loss_is_log_vocab():
    m = tiny(V=13)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    loss, _ = loss_and_grads(m, [[1, 2, 3, 4, 5], [6, 7, 8]], ObjectiveSpec("mle"))
    assert loss.item() == pytest.approx(math.log(13), abs=1e-6)


def test_masks_required_exactly_for_dropout_objectives():
    m = tiny()
    with pytest.raises(ValueError):
        loss_and_grads(m, [[1, 2, 3]], ObjectiveSpec("rep_dropout"))
    with pytest.raises(ValueError):
        loss_and_grads(m, [[1, 2, 3]], ObjectiveSpec("mle"), torch.zeros(1, 2, 3))


def test_nan_loss_reported():
    m = tiny()
    with torch.no_grad():
        m.tok_emb.weight[0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="non-finite"):
        loss_and_grads(m, [[0, 1, 2]], ObjectiveSpec("mle"))


def test_p0_rep_dropout_loss_bit_identical_to_mle():
    seqs = [[1, 2, 1, 2, 3, 1, 2], [4, 4, 4, 5, 6, 7, 8]]
    m = tiny()
    mle, g1 = loss_and_grads(m, seqs, ObjectiveSpec("mle"))
    spec = ObjectiveSpec("rep_dropout", p=0.0)
    rd, g2 = loss_and_grads(m, seqs, spec, batch_key_masks(seqs, 2, spec, 0))
    assert torch.equal(mle, rd)
    assert all(torch.equal(g1[k], g2[k]) for k in g1)


@pytest.mark.parametrize("objective", ["mle", "rep_dropout"])
def test_gradients_match_finite_differences(objective):
    torch.manual_seed(0)
    m = TinyGPT(ModelConfig(7, layers=2, heads=2, d_model=32, max_len=12)).double()
    seqs = [[0, 1, 2, 0, 1, 3, 4, 0, 1, 2], [5, 6, 5, 6, 2, 2, 2, 1, 5, 6]]
    spec = ObjectiveSpec(objective, p=0.6)
    km = batch_key_masks(seqs, 2, spec, 3)
    if km is not None:
        assert (km != 0).any()
    _, grads = loss_and_grads(m, seqs, spec, km)
    fd = finite_difference_grads(m, torch.tensor(seqs), km, eps=1e-4)
    assert set(fd) == set(grads)
    assert max_relative_error(grads, fd, floor=1e-7) < 1e-4


def _constant_logits_model(V, best, tied=()):
    """Every position gets the same logits: 1 for ``best`` and ``tied``, 0 elsewhere."""
    m = TinyGPT(ModelConfig(V, 1, 1, 4, max_len=16))
    with torch.no_grad():
        m.tok_emb.weight.zero_()
        m.tok_emb.weight[best, 0] = 1.0
        for t in tied:
            m.tok_emb.weight[t, 0] = 1.0

    def hidden(ids, key_masks=None, return_weights=False):
        h = torch.zeros(*ids.shape, 4)
        h[..., 0] = 1.0
        return h
    m.hidden = hidden
    return m


def test_greedy_constant_argmax():
    m = _constant_logits_model(9, 5)
    out = greedy_decode(m, [1, 2, 3], gen_len=128)
    assert out == [1, 2, 3] + [5] * 128


def test_greedy_ties_go_to_lowest_id():
    m = _constant_logits_model(9, 6, tied=(2, 8))
    assert greedy_decode(m, [1], gen_len=3) == [1, 2, 2, 2]


def test_greedy_zero_length_and_empty_prompt():
    m = tiny()
    assert greedy_decode(m, [4, 5], gen_len=0) == [4, 5]
    with pytest.raises(ValueError):
        greedy_decode(m, [[]], gen_len=3)


def test_greedy_deterministic_and_batched_matches_single():
    m = tiny(max_len=8)
    prompts = [[1, 2, 3], [4, 5], [6, 7, 8]]
    batched = greedy_decode(m, prompts, gen_len=12)
    assert batched == greedy_decode(m, prompts, gen_len=12)
    assert [greedy_decode(m, p, gen_len=12) for p in prompts] == batched


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = tiny()
    opt = make_optimizer(m.parameters(), TrainConfig(steps=2, warmup=1))
    m.train()
    loss_and_grads(m, [[1, 2, 3, 4]], ObjectiveSpec("mle"))
    opt.step()
    m.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, opt, step=7, extra={"seed": 3}, rng_state={"torch": torch.get_rng_state()})
    with open(path, "rb") as f:
        assert f.read(8) == b"REPDROP\x00"
    header, arrays = read_checkpoint(path)
    assert header["step"] == 7 and header["extra"]["seed"] == 3
    loaded, _, opt2 = load_checkpoint(path, lambda ps: make_optimizer(ps, TrainConfig(steps=2, warmup=1)))
    x = torch.tensor([[1, 2, 3, 4, 5]])
    with torch.no_grad():
        assert torch.equal(m(x), loaded.eval()(x))
    for (n, p), p2 in zip(m.named_parameters(), loaded.parameters()):
        assert torch.equal(opt.state[p]["exp_avg"], opt2.state[p2]["exp_avg"])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(path)
