"""``repdrop`` command line: corpus analysis, sharding, training, decoding,
evaluation, probing, inflow statistics, reports and whole experiments.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from typing import List, Optional

from .config import ConfigError, ExperimentConfig, desk_preset
from .corpus import (EmptyCorpusError, Vocabulary, build_vocab, extract_prompts, load_corpus, read_lines,
                     shard_by_rep2, write_shards)
from .metrics import MetricConfig, evaluate_sequences, perplexity, reports_to_csv
from .prepare import SOURCES, build_splits, write_splits

logger = logging.getLogger("repdrop")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _json(path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_config(args) -> ExperimentConfig:
    base = desk_preset() if args.preset == "desk" else ExperimentConfig()
    cfg = ExperimentConfig.load(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    for key in ("kind", "p", "n", "gamma", "alpha", "scope"):
        value = getattr(args, f"objective_{key}", None)
        if value is not None:
            cfg = cfg.with_updates(objective={key: value})
    if getattr(args, "steps", None) is not None:
        cfg = cfg.with_updates(train={"steps": args.steps, "warmup": min(cfg.train.warmup, args.steps)})
    return cfg


def _exact_vocab(texts) -> Vocabulary:
    types = {t for line in texts for t in line.split()}
    return build_vocab(texts, len(types) + 1)


def _vocab_for_checkpoint(ckpt_path, vocab_path=None) -> Vocabulary:
    path = vocab_path or os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "vocab.txt")
    if not os.path.exists(path):
        raise UsageError(f"vocabulary file {path} not found (use --vocab)")
    return Vocabulary.load(path)


def _load_model(ckpt_path, vocab_path=None):
    from .model import load_checkpoint
    if not os.path.exists(ckpt_path):
        raise UsageError(f"checkpoint {ckpt_path} not found")
    model, header, _ = load_checkpoint(ckpt_path)
    vocab = _vocab_for_checkpoint(ckpt_path, vocab_path)
    if vocab.size != model.vocab_size:
        raise ValueError(f"vocabulary mismatch: checkpoint has {model.vocab_size} tokens, vocab file {vocab.size}")
    return model, vocab, header


# -- verbs -----------------------------------------------------------------

def cmd_prepare(args, cfg):
    paths = write_splits(build_splits(args.raw, args.source, seed=cfg.seed), args.dest or os.path.join("data", args.source))
    print(json.dumps(paths, indent=2))


def cmd_analyze(args, cfg):
    texts = read_lines(args.corpus)
    if not texts:
        raise EmptyCorpusError(f"{args.corpus} has no documents")
    vocab = Vocabulary.load(args.vocab) if args.vocab else _exact_vocab(texts)
    corpus = load_corpus(args.corpus, vocab)
    report = evaluate_sequences([d.ids for d in corpus.documents],
                                MetricConfig(cfg.metrics.ns_tuple(), cfg.metrics.w),
                                name=os.path.basename(args.corpus))
    stem = os.path.join(cfg.out, "analysis")
    _json(stem + ".json", {"report": report.to_dict(), "seed": cfg.seed})
    _write(stem + ".csv", reports_to_csv([report]))
    print(reports_to_csv([report]), end="")


def cmd_shard(args, cfg):
    texts = read_lines(args.corpus)
    vocab = Vocabulary.load(args.vocab) if args.vocab else _exact_vocab(texts)
    shards = shard_by_rep2(load_corpus(args.corpus, vocab), args.k)
    manifest = write_shards(shards, vocab, cfg.out)
    print(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_train(args, cfg):
    from .experiments import load_vocab_for, train_model, write_history
    from .model import save_checkpoint
    cfg.validate()
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.ini"))
    vocab = load_vocab_for(cfg)
    vocab.save(os.path.join(out, "vocab.txt"))
    train_corpus = load_corpus(cfg.data.train, vocab)
    valid = load_corpus(cfg.data.valid, vocab) if cfg.data.valid else None
    high_inflow = None
    if cfg.objective_spec().needs_inflow:
        from .analysis import compute_inflow
        high_inflow = compute_inflow(train_corpus).high_inflow_tokens(cfg.objective.high_inflow_threshold)
    model, history, optimizer = train_model(cfg, vocab, train_corpus, valid, high_inflow)
    save_checkpoint(os.path.join(out, "model.ckpt"), model, optimizer, step=cfg.train.steps,
                    extra={"seed": cfg.seed, "fingerprint": cfg.fingerprint()})
    write_history(os.path.join(out, "history.csv"), history)
    print(os.path.join(out, "model.ckpt"))


def cmd_generate(args, cfg):
    from .experiments import write_generations
    from .model import greedy_decode
    model, vocab, _ = _load_model(args.checkpoint, args.vocab)
    corpus = load_corpus(args.prompts or cfg.data.test, vocab)
    prompts = extract_prompts(corpus, cfg.decode.prompt_len, cfg.decode.gen_len, limit=cfg.decode.num_prompts or None)
    full = greedy_decode(model, [p.ids for p in prompts.prompts], cfg.decode.gen_len)
    gens = [f[cfg.decode.prompt_len:] for f in full]
    path = os.path.join(cfg.out, "generations.jsonl")
    os.makedirs(cfg.out, exist_ok=True)
    write_generations(path, [p.ids for p in prompts.prompts], gens, vocab)
    print(path)


def cmd_eval(args, cfg):
    from .experiments import read_generations
    reports = []
    for run in args.runs:
        gen_path = os.path.join(run, "generations.jsonl")
        if not os.path.exists(gen_path):
            raise UsageError(f"{gen_path} not found")
        gens = [r["continuation"] for r in read_generations(gen_path)]
        if not gens or not any(gens):
            raise ValueError(f"{gen_path} holds no generations")
        model, vocab, _ = _load_model(os.path.join(run, "model.ckpt"))
        ppl = perplexity(model, load_corpus(args.test or cfg.data.test, vocab))
        name = os.path.basename(os.path.normpath(run))
        reports.append(evaluate_sequences(gens, MetricConfig(cfg.metrics.ns_tuple(), cfg.metrics.w), ppl, name))
    reports.sort(key=lambda r: r.name)
    table = reports_to_csv(reports)
    _write(os.path.join(cfg.out, "eval.csv"), table)
    _json(os.path.join(cfg.out, "eval.json"), {"reports": [r.to_dict() for r in reports], "seed": cfg.seed})
    print(table, end="")


def cmd_probe(args, cfg):
    from .analysis import probe_corpus, sign_test
    model, vocab, _ = _load_model(args.checkpoint, args.vocab)
    corpus = load_corpus(args.corpus or cfg.data.test, vocab)
    deltas, rows = probe_corpus(model, corpus.documents, args.n, args.limit)
    for r in rows:
        r["ngram"] = " ".join(vocab.id_to_token[int(t)] for t in r["ngram"].split())
    summary = {"targets": len(rows), "documents": len(deltas),
               "mean_delta": (sum(deltas) / len(deltas)) if deltas else 0.0,
               "sign_test": sign_test(deltas), "n": args.n, "seed": cfg.seed}
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["doc", "position", "ngram", "p_unmasked", "p_masked", "delta"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(os.path.join(cfg.out, "probe.csv"), buf.getvalue())
    _json(os.path.join(cfg.out, "probe.json"), summary)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_inflow(args, cfg):
    from .analysis import HighInflowMerger, compute_inflow, overlap_report, repetitive_pairs
    texts = read_lines(args.corpus)
    vocab = Vocabulary.load(args.vocab) if args.vocab else _exact_vocab(texts)
    corpus = load_corpus(args.corpus, vocab)
    table = compute_inflow(corpus)
    threshold = args.threshold if args.threshold is not None else (None if args.coverage else cfg.objective.high_inflow_threshold)
    merger = HighInflowMerger(threshold=threshold, target_coverage=args.coverage).fit(corpus)
    top = sorted(table.inflow.items(), key=lambda kv: (-kv[1], kv[0]))[:args.top]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token", "inflow"])
    for tok, val in top:
        w.writerow([vocab.id_to_token[tok], f"{val:.6f}"])
    _write(os.path.join(cfg.out, "inflow.csv"), buf.getvalue())
    docs = [d.ids for d in corpus.documents]
    overlap = overlap_report(merger.pairs_, repetitive_pairs(docs), docs) if merger.pairs_ else {}
    summary = {"threshold": merger.threshold_, "coverage": merger.coverage_, "num_pairs": len(merger.pairs_),
               "overlap_with_repetitive_pairs": overlap, "seed": cfg.seed}
    _json(os.path.join(cfg.out, "inflow.json"), summary)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_report(args, cfg):
    from .report import build_report
    result = build_report(args.run_dir, args.dest)
    print(json.dumps(result, indent=2))


def cmd_experiment(args, cfg):
    from . import experiments as ex
    if args.which == "single":
        res = ex.run_experiment(cfg, use_cache=not args.no_cache)
        print(reports_to_csv([res.report]), end="")
    elif args.which == "twin":
        runs = ex.twin_runs(cfg, use_cache=not args.no_cache)
        print(reports_to_csv([r.report for r in runs.values()]), end="")
    elif args.which == "sweep":
        runs = ex.sweep_runs(cfg, use_cache=not args.no_cache)
        for p, r in runs.items():
            print(f"p={p:g} rep2={100 * r.rep2:.2f} ppl={r.ppl:.2f}")
    else:
        rows = ex.shard_runs(cfg, k=args.k, use_cache=not args.no_cache)
        for r in rows:
            print(f"shard {r['shard']} train-rep2={100 * r['shard_rep2']:.2f} gen-rep2={100 * r['generated_rep2']:.2f}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="repdrop", description=__doc__.split("\n\n")[0].replace("\n", " ").replace("``", ""))
    ap.add_argument("--config", help="experiment config file (INI sections)")
    ap.add_argument("--preset", choices=["desk", "paper"], default="desk",
                    help="defaults the config file is layered on (default: desk)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build train/valid/test files from a raw public-domain text")
    p.add_argument("raw", help="plain_text_bible.py (or a directory holding it) for kjv; the play directory for shakespeare")
    p.add_argument("--source", choices=SOURCES, default="kjv")
    p.add_argument("--dest", help="output directory (default: data/<source>)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("analyze", help="rep-n / rep-w / rep-r of a corpus")
    p.add_argument("corpus")
    p.add_argument("--vocab", help="vocabulary file (default: every word type of the corpus)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("shard", help="split a corpus into rep-2-sorted shards")
    p.add_argument("corpus")
    p.add_argument("-k", type=int, default=6)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_shard)

    for name, func in (("train", cmd_train), ("experiment", cmd_experiment)):
        p = sub.add_parser(name, help="train one model" if name == "train" else "run a cached experiment pipeline")
        if name == "experiment":
            p.add_argument("which", choices=["single", "twin", "sweep", "shards"])
            p.add_argument("-k", type=int, default=5, help="number of shards")
            p.add_argument("--no-cache", action="store_true")
        p.add_argument("--objective", dest="objective_kind")
        p.add_argument("--p", dest="objective_p", type=float)
        p.add_argument("--n", dest="objective_n", type=int)
        p.add_argument("--gamma", dest="objective_gamma", type=float)
        p.add_argument("--alpha", dest="objective_alpha", type=float)
        p.add_argument("--scope", dest="objective_scope")
        p.add_argument("--steps", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="greedy continuations of held-out prompts")
    p.add_argument("checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--prompts", help="corpus to take prompts from (default: config test file)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="repetition metrics and test PPL for run directories")
    p.add_argument("runs", nargs="+", help="directories holding generations.jsonl, model.ckpt and vocab.txt")
    p.add_argument("--test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="self-reinforcement probe")
    p.add_argument("checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--corpus")
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--n", type=int, default=2)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inflow", help="word inflow and high-inflow pair selection")
    p.add_argument("corpus")
    p.add_argument("--vocab")
    p.add_argument("--threshold", type=float)
    p.add_argument("--coverage", type=float, help="pick the threshold reaching this merged-word fraction")
    p.add_argument("--top", type=int, default=50)
    p.set_defaults(func=cmd_inflow)

    p = sub.add_parser("report", help="summary tables and SVG charts for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--dest")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.out is None and args.verb not in ("experiment", "train"):
            cfg.out = "."
    except ConfigError as e:
        print(f"repdrop: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"repdrop: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"repdrop: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure: report and exit 2
        logger.debug("failure", exc_info=True)
        print(f"repdrop: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
