"""Command-line entry points.

Subcommands cover the full workflow: generate a synthetic task, pretrain a
masked language model on raw text, fine-tune with the semi-supervised
objective, sweep augmentation ablations, transfer across tasks, evaluate a
checkpoint, and preview augmentations. Errors print one machine-readable
line to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .augment import KINDS, AugmentKind, strong_view
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SynthSpec, generate_synthetic_task, load_tsv,
                   write_synth_files)
from .model import ModelConfig, init_model
from .prompting import PromptTask, TaskBinding
from .rng import RngStream
from .tokenizer import Vocab, build_vocab
from .trainer import evaluate, pretrain_mlm, run_experiment, run_transfer


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.1)


def _add_hp_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.95)
    p.add_argument("--mask-ratio", type=float, default=0.15)
    p.add_argument("--eval-interval", type=int, default=50)


def _hp_dict(args) -> dict:
    return {
        "lr": args.lr, "batch_size": args.batch_size, "steps": args.steps,
        "lambda1": args.lambda1, "lambda2": args.lambda2, "tau": args.tau,
        "mask_ratio": args.mask_ratio, "eval_interval": args.eval_interval,
    }


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="promptst",
        description="Few-shot prompt classification with self-training "
                    "on unlabeled text")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic word-soup task")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--vocab-words", type=int, default=100)
    p.add_argument("--tokens-per-class", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--pool-per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=200)
    p.add_argument("--corpus-lines", type=int, default=2000)
    p.add_argument("--label-words", choices=("class", "background"),
                   default="class",
                   help="'class': answer words are class tokens (solvable by "
                        "co-occurrence); 'background': answer words carry no "
                        "pretraining signal, so labels are required")
    p.add_argument("--corpus-token-frac", type=float, default=1.0,
                   help="fraction of each class vocabulary visible to the "
                        "pretraining corpus; below 1.0 the task carries "
                        "words the encoder has never read")

    p = sub.add_parser("pretrain", help="masked-token pretraining on raw text")
    p.add_argument("--corpus", required=True, help="one sentence per line")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--vocab", help="existing vocabulary file (else built)")
    p.add_argument("--task", help="task JSON whose words are folded into a "
                                  "freshly built vocabulary")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--mask-ratio", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="JSONL loss log path")
    _add_model_args(p)

    p = sub.add_parser("train", help="few-shot fine-tuning, one cell")
    p.add_argument("--task", required=True)
    p.add_argument("--train", required=True, help="labeled pool TSV")
    p.add_argument("--test", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--mu", type=int, default=4)
    p.add_argument("--kind", choices=KINDS, default="mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-splits", type=int, default=5)
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
    _add_hp_args(p)

    p = sub.add_parser("sweep", help="ablation sweep over augmentation kinds")
    p.add_argument("--task", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--mu-values", default="4",
                   help="comma-separated, e.g. 0,4")
    p.add_argument("--kinds", default=",".join(KINDS),
                   help="comma-separated augmentation kinds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-splits", type=int, default=5)
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
    p.add_argument("--grid", help="JSON dict of hyperparameter candidates, "
                                  'e.g. {"lr": [1e-4, 3e-4]}')
    _add_hp_args(p)

    p = sub.add_parser("transfer", help="transfer to an unlabeled target task")
    p.add_argument("--source-task", required=True)
    p.add_argument("--source-train", required=True)
    p.add_argument("--target-task", required=True)
    p.add_argument("--target-unlabeled", required=True,
                   help="text-only TSV for the target task")
    p.add_argument("--target-test", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=KINDS, default="mask")
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
    _add_hp_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test file")
    p.add_argument("--task", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")

    p = sub.add_parser("augment", help="preview strong views of a sentence")
    p.add_argument("--text", required=True)
    p.add_argument("--kind", choices=KINDS, default="mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", help="vocabulary file (else built from --text)")
    p.add_argument("--count", type=int, default=1, help="number of views")

    return ap


def cmd_gen_synth(args) -> int:
    spec = SynthSpec(
        num_classes=args.num_classes, vocab_words=args.vocab_words,
        tokens_per_class=args.tokens_per_class, noise=args.noise,
        min_len=args.min_len, max_len=args.max_len,
        pool_per_class=args.pool_per_class,
        test_per_class=args.test_per_class, corpus_lines=args.corpus_lines,
        label_words=args.label_words,
        corpus_token_frac=args.corpus_token_frac)
    data = generate_synthetic_task(spec, args.seed)
    paths = write_synth_files(data, args.out)
    print(json.dumps(paths, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    with open(args.corpus, encoding="utf-8") as f:
        corpus = [line.rstrip("\n") for line in f if line.strip()]
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        extra = []
        if args.task:
            task = PromptTask.load(args.task)
            extra = list(task.label_words) + task.template.literals()
        vocab = build_vocab(corpus, min_count=args.min_count,
                            extra_tokens=extra)
    cfg = ModelConfig(
        num_layers=args.num_layers, d_model=args.d_model,
        num_heads=args.num_heads, d_ff=args.d_ff,
        max_seq_len=args.max_seq_len, vocab_size=len(vocab),
        dropout_rate=args.dropout)
    root = RngStream(args.seed, "pretrain")
    model = init_model(cfg, root.child("init"))
    pretrain_mlm(model, corpus, vocab, steps=args.steps, lr=args.lr,
                 rng=root.child("mlm"), batch_size=args.batch_size,
                 mask_ratio=args.mask_ratio, log_path=args.log)
    save_checkpoint(args.out, model, vocab, step=args.steps,
                    rng_state=root.state())
    print(json.dumps({"checkpoint": args.out, "vocab_size": len(vocab),
                      "params": model.param_count()}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    exp = {
        "task": args.task, "train": args.train, "test": args.test,
        "checkpoint": args.checkpoint, "seed": args.seed,
        "num_splits": args.num_splits, "metric": args.metric,
        "n_values": [args.n], "mu_values": [args.mu], "kinds": [args.kind],
        "hp": {**_hp_dict(args), "mu": args.mu, "n": args.n},
    }
    report = run_experiment(exp, args.out)
    print(json.dumps({"report": os.path.join(args.out, "report.json"),
                      "cells": report["cells"]}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    mu_values = [int(m) for m in args.mu_values.split(",") if m != ""]
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    exp = {
        "task": args.task, "train": args.train, "test": args.test,
        "checkpoint": args.checkpoint, "seed": args.seed,
        "num_splits": args.num_splits, "metric": args.metric,
        "n_values": [args.n], "mu_values": mu_values, "kinds": kinds,
        "hp": {**_hp_dict(args), "n": args.n},
    }
    if args.grid:
        exp["grid"] = json.loads(args.grid)
    report = run_experiment(exp, args.out)
    print(json.dumps({"report": os.path.join(args.out, "report.json"),
                      "margins": report["margins"]}, sort_keys=True))
    return 0


def cmd_transfer(args) -> int:
    cfg = {
        "source_task": args.source_task, "source_train": args.source_train,
        "target_task": args.target_task,
        "target_unlabeled": args.target_unlabeled,
        "target_test": args.target_test, "checkpoint": args.checkpoint,
        "per_class": args.per_class, "num_seeds": args.num_seeds,
        "seed": args.seed, "kind": args.kind, "metric": args.metric,
        "hp": _hp_dict(args),
    }
    report = run_transfer(cfg, args.out)
    print(json.dumps({"main_mean": report["main_mean"],
                      "baseline_mean": report["baseline_mean"]},
                     sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    task = PromptTask.load(args.task)
    model, vocab, _, _ = load_checkpoint(args.checkpoint)
    binding = TaskBinding(task, vocab, model.config.max_seq_len)
    test = load_tsv(args.test, task.arity, task.labels)
    value = evaluate(model, test, binding, args.metric)
    print(json.dumps({args.metric: value, "n": len(test)}, sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = build_vocab([args.text])
    kind = AugmentKind.from_name(args.kind)
    seq = vocab.encode(args.text)
    root = RngStream(args.seed, "augment")
    for i in range(args.count):
        view, positions, originals = strong_view(seq, kind, root.child(f"v{i}"))
        print(json.dumps({
            "view": vocab.decode(view.ids),
            "masked_positions": positions,
            "original_tokens": [vocab.id_to_token[t] for t in originals],
        }, sort_keys=True))
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "augment": cmd_augment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        msg = {"error": type(e).__name__, "message": str(e)}
        print("ERROR " + json.dumps(msg, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
