"""End-to-end runs: train, decode held-out prompts, evaluate, and cache the
artifacts under ``<out>/<name>-<fingerprint>/``.

A run directory holds ``config.ini`` (resolved config), ``vocab.txt``,
``model.ckpt``, ``history.csv``, ``generations.jsonl``, ``metrics.json`` and
``metrics.csv``; wall-clock times go to ``meta.json`` so every other file is
a deterministic function of the config.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch

from .config import ExperimentConfig
from .corpus import Corpus, Vocabulary, build_vocab, extract_prompts, load_corpus, read_lines, shard_by_rep2, write_shards
from .metrics import MetricConfig, MetricsReport, corpus_rep_n, evaluate_sequences, perplexity, reports_to_csv
from .model import ModelConfig, TinyGPT, greedy_decode, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

SWEEP_RATES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class RunResult:
    name: str
    directory: str
    config: ExperimentConfig
    report: MetricsReport
    train_rep2: float
    train_seconds: float
    cached: bool
    valid_ppl: Optional[float] = None

    @property
    def rep2(self) -> float:
        return self.report.rep_n[2]

    @property
    def ppl(self) -> float:
        return self.report.ppl


def load_vocab_for(cfg: ExperimentConfig, vocab_source: Optional[str] = None) -> Vocabulary:
    """Vocabulary built from ``vocab_source`` (default: the training file)."""
    return build_vocab(read_lines(vocab_source or cfg.data.train), cfg.data.max_vocab)


def model_config(cfg: ExperimentConfig, vocab_size: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=vocab_size, layers=m.layers, heads=m.heads, d_model=m.d_model,
                       d_ff=m.d_ff, max_len=m.max_len, dropout=m.dropout)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(steps=t.steps, lr=t.lr, batch_size=t.batch_size, warmup=t.warmup,
                       grad_clip=t.grad_clip, seed=cfg.seed, eval_interval=t.eval_interval,
                       seq_len=t.seq_len, weight_decay=t.weight_decay, log_interval=t.log_interval,
                       max_eval_docs=t.max_eval_docs or None)


def run_directory(cfg: ExperimentConfig) -> str:
    label = cfg.name or cfg.objective.kind
    return os.path.join(cfg.out, f"{label}-{cfg.fingerprint()}")


def write_history(path, history: Sequence[dict]) -> None:
    cols = ["step", "loss", "smoothed_loss", "lr", "val_ppl"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in cols})


def write_generations(path, prompts, generations, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p, g in zip(prompts, generations):
            rec = {"prompt": list(p), "continuation": list(g),
                   "prompt_text": " ".join(vocab.id_to_token[t] for t in p),
                   "continuation_text": " ".join(vocab.id_to_token[t] for t in g)}
            f.write(json.dumps(rec) + "\n")


def read_generations(path) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def train_model(cfg: ExperimentConfig, vocab: Vocabulary, train_corpus: Corpus,
                valid_corpus: Optional[Corpus] = None, high_inflow=None):
    torch.manual_seed(cfg.seed)
    model = TinyGPT(model_config(cfg, vocab.size))
    valid_docs = None if valid_corpus is None else [d.ids for d in valid_corpus.documents]
    history, optimizer = train(model, [d.ids for d in train_corpus.documents], train_config(cfg),
                               cfg.objective_spec(), valid_docs, high_inflow=high_inflow)
    return model, history, optimizer


def evaluate_model(model: TinyGPT, cfg: ExperimentConfig, test_corpus: Corpus, name: str = ""):
    prompts = extract_prompts(test_corpus, cfg.decode.prompt_len, cfg.decode.gen_len,
                              limit=cfg.decode.num_prompts or None)
    full = greedy_decode(model, [p.ids for p in prompts.prompts], cfg.decode.gen_len)
    gens = [f[cfg.decode.prompt_len:] for f in full]
    ppl = perplexity(model, test_corpus)
    report = evaluate_sequences(gens, MetricConfig(cfg.metrics.ns_tuple(), cfg.metrics.w), ppl=ppl, name=name)
    return prompts, gens, report


def run_experiment(cfg: ExperimentConfig, use_cache: bool = True, high_inflow=None,
                   vocab_source: Optional[str] = None) -> RunResult:
    """Train, decode and evaluate one configuration; reuse a finished run
    directory with the same fingerprint when ``use_cache`` is set."""
    cfg.validate()
    out_dir = run_directory(cfg)
    name = cfg.name or cfg.objective.kind
    metrics_path = os.path.join(out_dir, "metrics.json")
    if use_cache and os.path.exists(metrics_path):
        with open(metrics_path) as f:
            saved = json.load(f)
        meta = _read_meta(out_dir)
        logger.info("reusing cached run %s", out_dir)
        return RunResult(name, out_dir, cfg, MetricsReport.from_dict(saved["report"]), saved["train_rep2"],
                         meta.get("train_seconds", float("nan")), True, saved.get("valid_ppl"))

    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.ini"))
    vocab = load_vocab_for(cfg, vocab_source)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    train_corpus = load_corpus(cfg.data.train, vocab)
    valid_corpus = load_corpus(cfg.data.valid, vocab) if cfg.data.valid else None
    test_corpus = load_corpus(cfg.data.test, vocab)

    started = time.time()
    model, history, optimizer = train_model(cfg, vocab, train_corpus, valid_corpus, high_inflow)
    train_seconds = time.time() - started
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, optimizer, step=cfg.train.steps,
                    extra={"seed": cfg.seed, "fingerprint": cfg.fingerprint()})
    write_history(os.path.join(out_dir, "history.csv"), history)

    started = time.time()
    prompts, gens, report = evaluate_model(model, cfg, test_corpus, name)
    valid_ppl = perplexity(model, valid_corpus) if valid_corpus is not None else None
    eval_seconds = time.time() - started
    write_generations(os.path.join(out_dir, "generations.jsonl"), [p.ids for p in prompts.prompts], gens, vocab)
    train_rep2 = corpus_rep_n([d.ids for d in train_corpus.documents], 2)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(reports_to_csv([report]))
    with open(metrics_path, "w") as f:
        json.dump({"report": report.to_dict(), "train_rep2": train_rep2, "valid_ppl": valid_ppl, "seed": cfg.seed,
                   "fingerprint": cfg.fingerprint()}, f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump({"train_seconds": train_seconds, "eval_seconds": eval_seconds,
                   "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}, f, indent=2)
    return RunResult(name, out_dir, cfg, report, train_rep2, train_seconds, False, valid_ppl)


def _read_meta(out_dir) -> dict:
    path = os.path.join(out_dir, "meta.json")
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return json.load(f)


def load_run_model(directory):
    model, header, _ = load_checkpoint(os.path.join(directory, "model.ckpt"))
    vocab = Vocabulary.load(os.path.join(directory, "vocab.txt"))
    return model, vocab


def twin_runs(base: ExperimentConfig, p: float = 0.6, n: int = 2, use_cache: bool = True) -> Dict[str, RunResult]:
    """MLE, repetition dropout and random dropout under one protocol."""
    out = {}
    for kind in ("mle", "rep_dropout", "rand_dropout"):
        cfg = base.with_updates(objective={"kind": kind, "p": p, "n": n}, name=kind)
        out[kind] = run_experiment(cfg, use_cache)
    return out


def sweep_runs(base: ExperimentConfig, rates: Sequence[float] = SWEEP_RATES, n: int = 2,
               use_cache: bool = True) -> Dict[float, RunResult]:
    """Repetition dropout at each rate. Rate 0 leaves every mask empty, which
    is the MLE run bit for bit, so the MLE run stands in for it."""
    out = {}
    for p in rates:
        if p == 0:
            cfg = base.with_updates(objective={"kind": "mle", "p": 0.6, "n": n}, name="mle")
        else:
            cfg = base.with_updates(objective={"kind": "rep_dropout", "p": p, "n": n},
                                    name="rep_dropout" if p == 0.6 else f"rep_dropout_p{p:g}")
        out[p] = run_experiment(cfg, use_cache)
    return out


def shard_runs(base: ExperimentConfig, k: int = 5, use_cache: bool = True) -> List[dict]:
    """Split the training file into ``k`` rep-2-sorted shards and train one
    MLE model per shard. The vocabulary always comes from the full training
    file so every shard model shares it."""
    vocab = load_vocab_for(base)
    full = load_corpus(base.data.train, vocab)
    shard_dir = os.path.join(base.out, f"shards-k{k}-{base.fingerprint()}")
    manifest_path = os.path.join(shard_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
    else:
        manifest = write_shards(shard_by_rep2(full, k), vocab, shard_dir)
    rows = []
    for entry in manifest["shards"]:
        cfg = base.with_updates(data={"train": os.path.join(shard_dir, entry["file"])},
                                objective={"kind": "mle"}, name=f"shard{entry['index']}")
        res = run_experiment(cfg, use_cache, vocab_source=base.data.train)
        rows.append({"shard": entry["index"], "shard_rep2": entry["rep2_mean"],
                     "word_count": entry["word_count"], "generated_rep2": res.rep2,
                     "ppl": res.ppl, "run": res.directory})
    with open(os.path.join(shard_dir, "shards.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
