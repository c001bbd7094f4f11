import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import repdrop.training as training
from repdrop.model import ModelConfig, TinyGPT
from repdrop.objectives import ObjectiveSpec
from repdrop.training import LanguageModel, TrainConfig, TrainingDiverged, pad_batch, train


def small_model(V=8, seed=0):
    torch.manual_seed(seed)
    return TinyGPT(ModelConfig(V, layers=2, heads=2, d_model=16, max_len=32))


DOCS = [[1, 2, 3, 4] * 6, [5, 6, 5, 6, 7, 1, 2, 3], [2, 2, 3, 3, 4, 4, 5, 5, 6]]


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_schedule_warmup_then_linear_decay():
    cfg = TrainConfig(steps=100, lr=1.0, warmup=10)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(9) == pytest.approx(1.0)
    assert cfg.lr_at(10) == pytest.approx(1.0)
    assert cfg.lr_at(55) == pytest.approx(0.5)
    assert cfg.lr_at(100) == 0.0
    with pytest.raises(ValueError):
        TrainConfig(steps=5, warmup=10)


def test_pad_batch():
    ids, valid = pad_batch([[1, 2, 3], [4]])
    assert ids.tolist() == [[1, 2, 3], [4, 0, 0]]
    assert valid.tolist() == [[True, True, True], [True, False, False]]


def test_zero_steps_keeps_initialization():
    m = small_model()
    before = params(m)
    history, _ = train(m, DOCS, TrainConfig(steps=0, warmup=0, batch_size=2, seq_len=16))
    assert history == []
    assert all(torch.equal(before[k], v) for k, v in params(m).items())


@pytest.mark.parametrize("objective", [ObjectiveSpec("mle"), ObjectiveSpec("rep_dropout", p=0.6),
                                       ObjectiveSpec("rand_dropout", p=0.6),
                                       ObjectiveSpec("unlikelihood", scope="prefix_random_subset")])
def test_same_seed_same_checkpoint(objective):
    cfg = TrainConfig(steps=15, lr=1e-2, warmup=3, batch_size=2, seq_len=16, seed=4, log_interval=1)
    runs = []
    for _ in range(2):
        m = small_model()
        hist, _ = train(m, DOCS, cfg, objective)
        runs.append((params(m), [r["loss"] for r in hist]))
    assert runs[0][1] == runs[1][1]
    assert all(torch.equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_rep_dropout_p0_checkpoint_equals_mle():
    cfg = TrainConfig(steps=10, lr=1e-2, warmup=2, batch_size=2, seq_len=16, seed=1)
    out = []
    for spec in (ObjectiveSpec("mle"), ObjectiveSpec("rep_dropout", p=0.0)):
        m = small_model()
        train(m, DOCS, cfg, spec)
        out.append(params(m))
    assert all(torch.equal(out[0][k], out[1][k]) for k in out[0])


def test_memorizes_repeated_toy_corpus():
    docs = [[1, 2, 3, 4] * 16 for _ in range(8)]
    m = small_model(V=5)
    cfg = TrainConfig(steps=2000, lr=3e-3, warmup=100, batch_size=4, seq_len=32, log_interval=50)
    hist, _ = train(m, docs, cfg)
    below = [r["step"] for r in hist if r["smoothed_loss"] < 0.1]
    assert below and below[0] <= 2000


def test_mle_loss_falls_on_toy_corpus():
    m = small_model()
    cfg = TrainConfig(steps=300, lr=3e-3, warmup=30, batch_size=3, seq_len=16, log_interval=50)
    hist, _ = train(m, DOCS * 4, cfg)
    smoothed = [r["smoothed_loss"] for r in hist]
    assert smoothed[-1] < smoothed[0]


def test_divergence_aborts(monkeypatch):
    real = training.compute_loss
    calls = {"n": 0}

    def exploding(*a, **k):
        calls["n"] += 1
        loss = real(*a, **k)
        return loss if calls["n"] == 1 else loss * 0 + 1e4
    monkeypatch.setattr(training, "compute_loss", exploding)
    with pytest.raises(TrainingDiverged):
        train(small_model(), DOCS, TrainConfig(steps=1500, warmup=1, batch_size=1, seq_len=8))
    assert calls["n"] == 1001


def test_validation_ppl_logged():
    cfg = TrainConfig(steps=4, warmup=1, batch_size=2, seq_len=16, eval_interval=2, log_interval=100)
    hist, _ = train(small_model(), DOCS, cfg, valid_docs=DOCS[:1])
    assert [r["step"] for r in hist if r["val_ppl"] is not None] == [2, 4]


def test_high_inflow_scope_needs_token_set():
    with pytest.raises(ValueError):
        train(small_model(), DOCS, TrainConfig(steps=1, warmup=0),
              ObjectiveSpec("unlikelihood", scope="high_inflow_all"))


def test_estimator_api(tmp_path):
    est = LanguageModel(layers=1, heads=2, d_model=16, max_len=32, steps=20, lr=1e-2, batch_size=2)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.generate([[1, 2]])
    est.fit(DOCS)
    assert est.model_.vocab_size == 8
    gens = est.generate([[1, 2, 3], [5, 6]], gen_len=5)
    assert [len(g) for g in gens] == [5, 5]
    assert est.predict([[1, 2, 3]], gen_len=5) == gens[:1]
    ppl = est.perplexity(DOCS)
    assert ppl > 1 and est.score(DOCS) == pytest.approx(-torch.tensor(ppl).log().item())
    path = tmp_path / "lm.ckpt"
    est.save(path)
    again = LanguageModel.load(path)
    assert again.get_params() == est.get_params()
    assert again.generate([[1, 2, 3], [5, 6]], gen_len=5) == gens
