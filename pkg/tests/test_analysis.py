import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from repdrop.analysis import (HighInflowMerger, ProbeResult, amplification_report, compute_inflow,
                              merge_pairs, overlap_report, repetitive_pairs, select_high_inflow_pairs,
                              self_reinforcement_probe, sign_test, spearman, unmerge)
from repdrop.corpus import build_vocab, tokenize
from repdrop.model import ModelConfig, TinyGPT
from repdrop.training import TrainConfig, train

docs_strategy = st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=15), min_size=1, max_size=6)


def test_inflow_examples():
    t = compute_inflow([[0, 1]])
    assert t.inflow[1] == 1.0 and t.inflow[0] == 0.0
    a, b, c = 0, 1, 2
    t = compute_inflow([[a, b], [a, c]])
    assert t.inflow[b] == 0.5 and t.inflow[c] == 0.5 and t.inflow[a] == 0.0
    with pytest.raises(ValueError):
        compute_inflow([])


@settings(max_examples=60, deadline=None)
@given(docs_strategy)
def test_inflow_rows_normalized(docs):
    t = compute_inflow(docs)
    for v in t.successor_totals:
        assert math.isclose(sum(t.conditional(v, w) for w in range(6)), 1.0)
    assert all(x >= 0 for x in t.inflow.values())
    # summing P(w|v) over all w and v counts each predecessor once
    assert math.isclose(sum(t.inflow.values()), len(t.successor_totals))


def test_pair_selection_rules():
    docs = [[0, 1, 2], [0, 3]]
    t = compute_inflow(docs)
    pairs, _, _ = select_high_inflow_pairs(t, threshold=10.0)
    assert pairs == set()
    pairs, _, _ = select_high_inflow_pairs(t, threshold=0.0)
    assert pairs == {(0, 1), (1, 2), (0, 3)}


def test_coverage_calibration_reaches_target():
    rng = random.Random(0)
    docs = [[rng.randrange(20) for _ in range(40)] for _ in range(30)]
    t = compute_inflow(docs)
    for target in (0.1, 0.3, 0.5):
        pairs, thr, cov = select_high_inflow_pairs(t, corpus=docs, target_coverage=target)
        assert cov >= target
        # one notch higher threshold falls short
        higher = sorted(v for v in set(t.inflow.values()) if v > thr)
        if higher:
            _, _, cov2 = select_high_inflow_pairs(t, threshold=higher[0], corpus=docs)
            assert cov2 < target


def test_merge_examples():
    assert merge_pairs([[0, 1, 2]], {(0, 1)}, base_vocab_size=3)[0] == [[3, 2]]
    assert merge_pairs([[0, 0, 0]], {(0, 0)}, base_vocab_size=1)[0] == [[1, 0]]
    assert merge_pairs([[0, 1, 2]], set())[0] == [[0, 1, 2]]


@settings(max_examples=60, deadline=None)
@given(docs_strategy, st.sets(st.tuples(st.integers(0, 5), st.integers(0, 5)), max_size=8))
def test_merge_unmerge_roundtrip(docs, pairs):
    merged, fused = merge_pairs(docs, pairs, base_vocab_size=6)
    assert unmerge(merged, fused) == docs


def test_merger_estimator_and_vocab():
    texts = ["of the king of the realm", "the king of france"]
    vocab = build_vocab(texts, 50)
    docs = [tokenize(t, vocab).ids for t in texts]
    m = HighInflowMerger(threshold=0.0, base_vocab_size=vocab.size).fit(docs)
    merged = m.transform(docs)
    assert m.inverse_transform(merged) == docs
    ext = m.extend_vocabulary(vocab)
    assert ext.size == vocab.size + len(m.pairs_)
    for pair, fid in m.fused_ids_.items():
        assert ext.id_to_token[fid] == "_".join(vocab.id_to_token[t] for t in pair)
    with pytest.raises(NotFittedError):
        HighInflowMerger().transform(docs)


def test_merger_variants():
    docs = [[0, 1, 2, 0, 1, 3, 4, 5], [2, 3, 4, 5, 1, 2]]
    base = dict(threshold=0.0, base_vocab_size=6, seed=0)
    rep = HighInflowMerger(variant="repetitive", **base).fit(docs).transform(docs)
    # only (0, 1) repeats inside a document
    assert rep[0] == [6, 2, 6, 3, 4, 5] and rep[1] == docs[1]
    rnd = HighInflowMerger(variant="random_subset", **base).fit(docs).transform(docs)
    n_fused = lambda ds: sum(1 for d in ds for t in d if t >= 6)
    assert n_fused(rnd) == n_fused(rep)
    with pytest.raises(ValueError):
        HighInflowMerger(variant="bogus").fit(docs)


def test_overlap_examples():
    assert overlap_report({1, 2}, {1, 2})["fraction_of_a"] == 1.0
    assert overlap_report({1, 2}, {3})["fraction_of_a"] == 0.0
    assert overlap_report({"x", "y", "z"}, {"y"})["fraction_of_a"] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        overlap_report(set(), {1})


@settings(max_examples=60, deadline=None)
@given(st.sets(st.integers(0, 9), min_size=1), st.sets(st.integers(0, 9)))
def test_overlap_bounds(a, b):
    r = overlap_report(a, b)
    assert 0 <= r["fraction_of_a"] <= 1
    assert r["size_intersection"] <= min(len(a), len(b))


def test_overlap_word_percent():
    docs = [[0, 1, 2, 0, 1]]
    r = overlap_report({(0, 1)}, {(0, 1), (1, 2)}, docs)
    assert r["word_percent_a"] == pytest.approx(80.0)
    assert repetitive_pairs(docs) == {(0, 1)}


def test_amplification_examples():
    assert amplification_report(0.03, 0.45)["ratio"] == pytest.approx(15.0)
    assert amplification_report(0.2, 0.2)["ratio"] == 1.0
    assert amplification_report(0.0356, 0.4705)["ratio"] == pytest.approx(13.2, abs=0.05)
    with pytest.raises(ValueError, match="undefined ratio"):
        amplification_report(0.0, 0.5)


def test_sign_test_and_spearman():
    assert sign_test([0.1] * 10)["p_value"] == pytest.approx(0.5 ** 10)
    assert sign_test([0.0, 0.0])["p_value"] == 1.0
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def uniform_model(V=10):
    m = TinyGPT(ModelConfig(V, 2, 2, 8, max_len=32))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m


def test_probe_uniform_model_zero_delta():
    res = self_reinforcement_probe(uniform_model(), [1, 2, 3, 1, 2, 4, 3, 1, 2], 2)
    assert res and all(r.delta == 0.0 for r in res)
    assert all(r.p_unmasked == pytest.approx(0.01) for r in res)


def test_probe_no_repeats_empty():
    assert self_reinforcement_probe(uniform_model(), [1, 2, 3, 4], 2) == []


def test_probe_masks_earlier_occurrences_only():
    res = self_reinforcement_probe(uniform_model(), [5, 1, 2, 6, 1, 2], 2)
    assert len(res) == 1
    assert res[0].start == 4 and res[0].masked_positions == [1, 2] and res[0].ngram == (1, 2)


def test_probe_trained_copy_model():
    # sequences "x y z ... x y z ...": the second half is predictable only by copying
    rng = random.Random(0)
    V = 12
    docs = []
    for _ in range(400):
        half = [rng.randrange(1, V) for _ in range(8)]
        docs.append(half + half)
    torch.manual_seed(0)
    model = TinyGPT(ModelConfig(V, 2, 2, 32, max_len=16))
    train(model, docs, TrainConfig(steps=600, lr=3e-3, warmup=50, batch_size=16, seq_len=16, log_interval=600))
    a, b, c = 3, 7, 9
    res = self_reinforcement_probe(model, [a, b, c, a, b], 2)
    assert len(res) == 1
    probs = model.token_probs([a, b, c, a, b])
    masked = model.token_probs([a, b, c, a, b], [-1e9, -1e9, 0, 0, 0])
    assert probs[4] > 5 * masked[4]
    assert res[0].delta > 0


def test_probe_result_row():
    r = ProbeResult((1, 2), 4, [0, 1], 0.5, 0.25)
    assert r.delta == 0.25 and r.to_row()["ngram"] == "1 2"
